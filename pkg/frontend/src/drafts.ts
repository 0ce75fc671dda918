/**
 * Draft persistence keyed by (reader, unit), backed by browser localStorage
 * (or any Storage-shaped object in tests). A draft survives page reloads and
 * keeps its annotation_id so a retried submit stays idempotent.
 */

export interface StorageLike {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
  removeItem(key: string): void;
}

export interface PhenomenonDraft {
  description: string;
  lexicon_category: string;
  cancer_association: string;
}

export interface Draft {
  annotation_id: string;
  recognizable: boolean;
  phenomena: PhenomenonDraft[];
}

export class MemoryStorage implements StorageLike {
  private map = new Map<string, string>();

  getItem(key: string): string | null {
    return this.map.has(key) ? this.map.get(key)! : null;
  }

  setItem(key: string, value: string): void {
    this.map.set(key, value);
  }

  removeItem(key: string): void {
    this.map.delete(key);
  }
}

const PREFIX = "unitscope.draft";

export class DraftStore {
  constructor(private storage: StorageLike) {}

  private key(readerId: string, unitId: string): string {
    return `${PREFIX}.${readerId}.${unitId}`;
  }

  load(readerId: string, unitId: string): Draft | null {
    const raw = this.storage.getItem(this.key(readerId, unitId));
    if (raw === null) {
      return null;
    }
    try {
      const parsed = JSON.parse(raw) as Draft;
      if (typeof parsed.annotation_id !== "string" || !Array.isArray(parsed.phenomena)) {
        return null;
      }
      return parsed;
    } catch {
      return null;
    }
  }

  save(readerId: string, unitId: string, draft: Draft): void {
    this.storage.setItem(this.key(readerId, unitId), JSON.stringify(draft));
  }

  clear(readerId: string, unitId: string): void {
    this.storage.removeItem(this.key(readerId, unitId));
  }
}
