// Typed client for the annotation service. The fetch implementation is
// injected so the controller can run headless (tests, scripted sessions).

export interface QueueItem {
  request_id: string;
  proposal_id: string;
  image_id: string;
  box: [number, number, number, number];
  s_score: number | null;
  positive_categories: number[];
  thumbnail_png_base64: string;
  round: number;
}

export interface Stats {
  rounds: number;
  annotated_count: number;
  pseudo_count: number;
  current_map: number;
  finished: boolean;
}

export interface SubmitOutcome {
  ok: boolean;
  status: number;
  body: { status?: string; error?: string };
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export const BACKGROUND = -1;

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = fetch.bind(globalThis),
  ) {}

  async queue(): Promise<QueueItem[]> {
    const response = await this.fetchImpl(`${this.baseUrl}/api/queue`);
    if (!response.ok) {
      throw new Error(`queue fetch failed: HTTP ${response.status}`);
    }
    return (await response.json()) as QueueItem[];
  }

  async stats(): Promise<Stats> {
    const response = await this.fetchImpl(`${this.baseUrl}/api/stats`);
    if (!response.ok) {
      throw new Error(`stats fetch failed: HTTP ${response.status}`);
    }
    return (await response.json()) as Stats;
  }

  async submitLabel(
    requestId: string,
    label: number,
    correctedBox?: [number, number, number, number],
  ): Promise<SubmitOutcome> {
    const payload: Record<string, unknown> = { request_id: requestId, label };
    if (correctedBox) {
      payload.corrected_box = correctedBox;
    }
    const response = await this.fetchImpl(`${this.baseUrl}/api/labels`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
    let body: SubmitOutcome["body"] = {};
    try {
      body = (await response.json()) as SubmitOutcome["body"];
    } catch {
      body = {};
    }
    return { ok: response.ok, status: response.status, body };
  }
}
