// Queue state machine shared by the DOM layer and scripted sessions.
//
// Every label submission corresponds to exactly one explicit choice; the
// controller never fabricates labels and never computes statistics on the
// client. Items move pending -> submitting -> done; a 409 marks the item
// stale and drops it; network failures retry idempotently (the server
// answers resubmissions with a no-op).

import { ApiClient, BACKGROUND, QueueItem, Stats } from "./api.js";

export type ItemState = "pending" | "submitting" | "done" | "stale";

export interface TrackedItem {
  item: QueueItem;
  state: ItemState;
  error?: string;
}

export class QueueController {
  readonly items = new Map<string, TrackedItem>();
  stats: Stats | null = null;
  offline = false;

  constructor(
    private readonly api: ApiClient,
    private readonly maxRetries: number = 2,
  ) {}

  async poll(): Promise<void> {
    let queue: QueueItem[];
    try {
      queue = await this.api.queue();
      this.stats = await this.api.stats();
      this.offline = false;
    } catch {
      this.offline = true;
      return;
    }
    const seen = new Set(queue.map((q) => q.request_id));
    for (const entry of queue) {
      const existing = this.items.get(entry.request_id);
      if (!existing) {
        this.items.set(entry.request_id, { item: entry, state: "pending" });
      }
    }
    // Items the server no longer lists are resolved (or expired): drop
    // finished ones so the view mirrors the live queue.
    for (const [requestId, tracked] of [...this.items]) {
      if (!seen.has(requestId) && tracked.state !== "submitting") {
        this.items.delete(requestId);
      }
    }
  }

  pending(): TrackedItem[] {
    return [...this.items.values()].filter((t) => t.state === "pending");
  }

  async submit(requestId: string, label: number): Promise<ItemState> {
    const tracked = this.items.get(requestId);
    if (!tracked || tracked.state !== "pending") {
      return tracked?.state ?? "stale";
    }
    tracked.state = "submitting";
    tracked.error = undefined;
    for (let attempt = 0; attempt <= this.maxRetries; attempt++) {
      let outcome;
      try {
        outcome = await this.api.submitLabel(requestId, label);
      } catch {
        continue; // network failure: retry; the server treats repeats as no-ops
      }
      if (outcome.ok) {
        tracked.state = "done";
        return tracked.state;
      }
      if (outcome.status === 409) {
        tracked.state = "stale";
        this.items.delete(requestId);
        return "stale";
      }
      tracked.state = "pending";
      tracked.error = outcome.body.error ?? `HTTP ${outcome.status}`;
      return tracked.state;
    }
    tracked.state = "pending";
    tracked.error = "network unreachable";
    return tracked.state;
  }

  async submitBackground(requestId: string): Promise<ItemState> {
    return this.submit(requestId, BACKGROUND);
  }
}
