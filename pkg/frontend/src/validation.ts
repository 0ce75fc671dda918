/**
 * Client-side annotation validation.
 *
 * These rules must match the service's 400 conditions exactly: a payload is
 * rejected here if and only if the service would reject it. The parity test
 * suite enforces this against a live service.
 */

import type { AnnotationPayload, Lexicon } from "./types.js";
import { CANCER_ASSOCIATIONS, NO_CATEGORY } from "./types.js";

export function validateAnnotation(payload: AnnotationPayload, lexicon: Lexicon): string[] {
  const errors: string[] = [];
  if (!payload.annotation_id) {
    errors.push("annotation_id must be nonempty");
  }
  if (!payload.reader_id) {
    errors.push("reader_id must be nonempty");
  }
  if (!payload.recognizable && payload.phenomena.length > 0) {
    errors.push("unrecognizable units must not list phenomena");
  }
  const knownCategories = new Set(lexicon.categories.map((c) => c.id));
  payload.phenomena.forEach((p, i) => {
    if (!p.description.trim()) {
      errors.push(`phenomenon ${i + 1}: description must be nonempty`);
    }
    if (!(CANCER_ASSOCIATIONS as string[]).includes(p.cancer_association)) {
      errors.push(`phenomenon ${i + 1}: invalid cancer association "${p.cancer_association}"`);
    }
    if (p.lexicon_category !== NO_CATEGORY && !knownCategories.has(p.lexicon_category)) {
      errors.push(`phenomenon ${i + 1}: unknown lexicon category "${p.lexicon_category}"`);
    }
  });
  return errors;
}

export function isValid(payload: AnnotationPayload, lexicon: Lexicon): boolean {
  return validateAnnotation(payload, lexicon).length === 0;
}
