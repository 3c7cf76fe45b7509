/** Typed client for the Q&A service HTTP API. The console displays service
 * payloads as-is and performs no retrieval or inference of its own. */

export interface RetrievedDoc {
  url: string;
  header: string;
  score: number;
  doc_id: string;
}

export interface AskResponse {
  answer: string;
  thought: string;
  references: string[];
  refusal: boolean;
  parse_ok: boolean;
  error?: string | null;
  retrieved: RetrievedDoc[];
}

export interface HealthResponse {
  status: string;
  index_fingerprint: string;
  corpus_size: number;
  models: { generator: string; embedder: string };
}

export interface DocResponse {
  doc_id: string;
  header: string;
  body: string;
  url: string;
}

export class ServiceError extends Error {
  constructor(message: string, public readonly status: number) {
    super(message);
    this.name = 'ServiceError';
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ServiceApi {
  constructor(
    private readonly baseUrl: string = '',
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  async ask(question: string, k?: number): Promise<AskResponse> {
    const response = await this.fetchImpl(`${this.baseUrl}/api/ask`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(k === undefined ? { question } : { question, k }),
    });
    if (!response.ok) {
      throw new ServiceError(`service returned ${response.status}`, response.status);
    }
    return (await response.json()) as AskResponse;
  }

  async health(): Promise<HealthResponse> {
    const response = await this.fetchImpl(`${this.baseUrl}/api/health`);
    if (!response.ok) {
      throw new ServiceError(`health check failed with ${response.status}`, response.status);
    }
    return (await response.json()) as HealthResponse;
  }

  async doc(docId: string): Promise<DocResponse> {
    const response = await this.fetchImpl(`${this.baseUrl}/api/doc/${encodeURIComponent(docId)}`);
    if (!response.ok) {
      throw new ServiceError(`document lookup failed with ${response.status}`, response.status);
    }
    return (await response.json()) as DocResponse;
  }
}
