/** Typed client for the survey service HTTP API. */

import type {
  AnnotationOut,
  AnnotationPayload,
  Lexicon,
  Report,
  UnitDetail,
  UnitSummary,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: unknown,
  ) {
    super(`API error ${status}: ${JSON.stringify(detail)}`);
  }
}

export interface SubmitResult {
  /** true when the service stored a new record (201); false on idempotent replay (200). */
  created: boolean;
  annotation: AnnotationOut;
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  private fetchImpl: FetchLike;

  constructor(
    private baseUrl: string = "",
    fetchImpl?: FetchLike,
  ) {
    this.fetchImpl = fetchImpl ?? ((input, init) => fetch(input, init));
  }

  private async get<T>(path: string): Promise<T> {
    const response = await this.fetchImpl(this.baseUrl + path);
    if (!response.ok) {
      throw new ApiError(response.status, await safeJson(response));
    }
    return (await response.json()) as T;
  }

  health(): Promise<{ status: string; units: number }> {
    return this.get("/api/health");
  }

  lexicon(): Promise<Lexicon> {
    return this.get("/api/lexicon");
  }

  listUnits(readerId: string): Promise<UnitSummary[]> {
    return this.get(`/api/units?reader_id=${encodeURIComponent(readerId)}`);
  }

  unitDetail(unitId: string, readerId: string): Promise<UnitDetail> {
    return this.get(
      `/api/units/${encodeURIComponent(unitId)}?reader_id=${encodeURIComponent(readerId)}`,
    );
  }

  report(): Promise<Report> {
    return this.get("/api/report");
  }

  async submitAnnotation(unitId: string, payload: AnnotationPayload): Promise<SubmitResult> {
    const response = await this.fetchImpl(
      `${this.baseUrl}/api/units/${encodeURIComponent(unitId)}/annotations`,
      {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(payload),
      },
    );
    if (response.status !== 201 && response.status !== 200) {
      throw new ApiError(response.status, await safeJson(response));
    }
    return {
      created: response.status === 201,
      annotation: (await response.json()) as AnnotationOut,
    };
  }
}

async function safeJson(response: Response): Promise<unknown> {
  try {
    return await response.json();
  } catch {
    return null;
  }
}
