/** Wire types mirroring the survey service API. */

export type CancerAssociation = "benign" | "malignant" | "unclear" | "none";

export const CANCER_ASSOCIATIONS: CancerAssociation[] = [
  "benign",
  "malignant",
  "unclear",
  "none",
];

/** Category id "none" means free text without a lexicon assignment. */
export const NO_CATEGORY = "none";

export interface LexiconCategory {
  id: string;
  display_name: string;
  group: string;
}

export interface Lexicon {
  groups: { id: string; display_name: string }[];
  categories: LexiconCategory[];
}

export interface UnitSummary {
  unit_id: string;
  montage_url: string;
  complete: boolean;
}

export interface PatchEntry {
  patch_id: string;
  score: number;
  case_id: string;
  context_url: string;
  x0: number;
  y0: number;
  w: number;
  h: number;
  argmax_row: number;
  argmax_col: number;
}

export interface PhenomenonPayload {
  description: string;
  lexicon_category: string;
  cancer_association: string;
}

export interface AnnotationPayload {
  annotation_id: string;
  reader_id: string;
  recognizable: boolean;
  phenomena: PhenomenonPayload[];
}

export interface AnnotationOut extends AnnotationPayload {
  unit_id: string;
  timestamp: number;
}

export interface UnitDetail {
  unit_id: string;
  layer: string;
  unit_index: number;
  threshold: number;
  montage_url: string;
  patches: PatchEntry[];
  annotations: AnnotationOut[];
}

export interface ReportGroup {
  group: string;
  display_name: string;
  unit_count: number;
  rows: {
    model: string;
    layer: string;
    unit_index: number;
    description: string;
    cancer_association: string;
    reader_id: string;
  }[];
}

export interface Report {
  groups: ReportGroup[];
  unrecognizable_units: number;
  entangled_units: number;
  units_annotated: number;
  annotation_count: number;
}
