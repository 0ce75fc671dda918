/**
 * Structured-report form state for one unit.
 *
 * Mutations persist to the draft store immediately, so nothing is lost when
 * the reader navigates away or the page reloads. Submission is optimistic
 * and idempotent: the draft's annotation_id is reused on retry, and a fresh
 * id is only minted after a successful store.
 */

import type { ApiClient, SubmitResult } from "./api.js";
import { ApiError } from "./api.js";
import type { Draft, DraftStore, PhenomenonDraft } from "./drafts.js";
import type { AnnotationPayload, Lexicon, UnitDetail } from "./types.js";
import { NO_CATEGORY } from "./types.js";
import { validateAnnotation } from "./validation.js";

function newId(): string {
  return crypto.randomUUID();
}

export function emptyPhenomenon(): PhenomenonDraft {
  return { description: "", lexicon_category: NO_CATEGORY, cancer_association: "unclear" };
}

export type SubmitOutcome =
  | { kind: "stored"; result: SubmitResult }
  | { kind: "invalid"; errors: string[] }
  | { kind: "rejected"; status: number; detail: unknown }
  | { kind: "network_error"; message: string };

export class ReportForm {
  recognizable = true;
  phenomena: PhenomenonDraft[] = [emptyPhenomenon()];
  private annotationId: string = newId();
  submitted = false;

  constructor(
    private api: ApiClient,
    private drafts: DraftStore,
    private lexicon: Lexicon,
    readonly readerId: string,
    readonly unitId: string,
  ) {}

  /** Prefers the reader's stored annotation, then a local draft. */
  hydrate(detail: UnitDetail): void {
    const prior = detail.annotations.find((a) => a.reader_id === this.readerId);
    if (prior) {
      this.recognizable = prior.recognizable;
      this.phenomena = prior.phenomena.length
        ? prior.phenomena.map((p) => ({ ...p }))
        : [emptyPhenomenon()];
      this.annotationId = newId(); // a re-submission is a new annotation
      this.submitted = true;
      return;
    }
    const draft = this.drafts.load(this.readerId, this.unitId);
    if (draft) {
      this.recognizable = draft.recognizable;
      this.phenomena = draft.phenomena.length
        ? draft.phenomena.map((p) => ({ ...p }))
        : [emptyPhenomenon()];
      this.annotationId = draft.annotation_id;
    }
  }

  private persist(): void {
    const draft: Draft = {
      annotation_id: this.annotationId,
      recognizable: this.recognizable,
      phenomena: this.phenomena.map((p) => ({ ...p })),
    };
    this.drafts.save(this.readerId, this.unitId, draft);
  }

  setRecognizable(value: boolean): void {
    this.recognizable = value;
    this.persist();
  }

  addPhenomenon(): void {
    this.phenomena.push(emptyPhenomenon());
    this.persist();
  }

  removePhenomenon(index: number): void {
    this.phenomena.splice(index, 1);
    if (this.phenomena.length === 0) {
      this.phenomena.push(emptyPhenomenon());
    }
    this.persist();
  }

  updatePhenomenon(index: number, patch: Partial<PhenomenonDraft>): void {
    const row = this.phenomena[index];
    if (!row) {
      return;
    }
    Object.assign(row, patch);
    this.persist();
  }

  /** Rows are hidden and omitted from the payload when not recognizable. */
  payload(): AnnotationPayload {
    return {
      annotation_id: this.annotationId,
      reader_id: this.readerId,
      recognizable: this.recognizable,
      phenomena: this.recognizable ? this.phenomena.map((p) => ({ ...p })) : [],
    };
  }

  errors(): string[] {
    return validateAnnotation(this.payload(), this.lexicon);
  }

  canSubmit(): boolean {
    return this.errors().length === 0;
  }

  async submit(): Promise<SubmitOutcome> {
    const payload = this.payload();
    const errors = validateAnnotation(payload, this.lexicon);
    if (errors.length > 0) {
      return { kind: "invalid", errors };
    }
    try {
      const result = await this.api.submitAnnotation(this.unitId, payload);
      this.drafts.clear(this.readerId, this.unitId);
      this.annotationId = newId();
      this.submitted = true;
      return { kind: "stored", result };
    } catch (err) {
      if (err instanceof ApiError) {
        // form state (and the draft's annotation_id) survive for a retry
        this.persist();
        return { kind: "rejected", status: err.status, detail: err.detail };
      }
      this.persist();
      return { kind: "network_error", message: err instanceof Error ? err.message : String(err) };
    }
  }
}
