// Typed client for the /v1 scoring service. The console performs no inference
// of its own: every number it displays comes from one of these responses.

export interface ExamSummary {
  exam_id: string;
  patient_id: string;
  patient_age_years: number;
  sequences: string[];
}

export interface EnsembleScore {
  value: number;
  sequence: string;
}

export interface QueryScore {
  query: string;
  per_sequence: Record<string, number>;
  ensemble: EnsembleScore;
}

export interface ScoreResponse {
  exam_id: string;
  queries: QueryScore[];
  abnormality: {
    per_sequence: Record<string, number>;
    ensemble: EnsembleScore;
  };
}

export interface RetrieveResult {
  exam_id: string;
  cosine: number;
}

export interface RetrieveResponse {
  query: string;
  sequence: string | null;
  k: number;
  results: RetrieveResult[];
}

export interface SaliencyResponse {
  exam_id: string;
  sequence: string;
  query: string;
  axis: number;
  key_slice: number;
  n_slices: number;
  lineout: number[];
  heatmap_png_base64: string;
  saliency_volume?: string;
}

export interface DiscrepancyFlag {
  query: string;
  scan_similarity: number;
  report_similarity: number;
  flagged: boolean;
}

export interface DiscrepancyResponse {
  exam_id: string;
  theta_scan: number;
  theta_report: number;
  flags: DiscrepancyFlag[];
}

export interface ServiceError {
  code: string;
  message: string;
}

export class ApiError extends Error {
  constructor(public status: number, public body: ServiceError) {
    super(`${body.code}: ${body.message}`);
  }
}

export class ApiClient {
  constructor(private baseUrl: string = "") {}

  setBaseUrl(url: string): void {
    this.baseUrl = url.replace(/\/$/, "");
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await fetch(this.baseUrl + path, init);
    const body = await response.json();
    if (!response.ok) {
      throw new ApiError(response.status, body as ServiceError);
    }
    return body as T;
  }

  private post<T>(path: string, payload: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  health(): Promise<{ status: string }> {
    return this.request("/health");
  }

  listExams(): Promise<{ exams: ExamSummary[]; count: number }> {
    return this.request("/v1/exams");
  }

  score(examId: string, queries: string[]): Promise<ScoreResponse> {
    return this.post("/v1/score", { exam_id: examId, queries });
  }

  retrieve(query: string, sequence: string | null, k: number): Promise<RetrieveResponse> {
    return this.post("/v1/retrieve", { query, sequence, k });
  }

  saliency(examId: string, sequence: string, query: string): Promise<SaliencyResponse> {
    return this.post("/v1/saliency", { exam_id: examId, sequence, query });
  }

  discrepancy(examId: string, reportText: string, templates?: string[]): Promise<DiscrepancyResponse> {
    const payload: Record<string, unknown> = { exam_id: examId, report_text: reportText };
    if (templates) payload.templates = templates;
    return this.post("/v1/discrepancy", payload);
  }
}
