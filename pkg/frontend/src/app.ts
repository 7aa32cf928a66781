// DOM layer: renders the live queue, wires one-click/keyboard labeling,
// and polls run stats. All displayed numbers come from the server.

import { BACKGROUND, ApiClient } from "./api.js";
import { QueueController, TrackedItem } from "./controller.js";

const POLL_INTERVAL_MS = 2000;
const CATEGORY_NAMES = ["red square", "red circle", "green triangle",
                        "green diamond", "blue cross"];

function categoryName(index: number): string {
  return CATEGORY_NAMES[index] ?? `class ${index}`;
}

class App {
  private readonly controller: QueueController;
  private focusedId: string | null = null;

  constructor(private readonly root: HTMLElement) {
    this.controller = new QueueController(new ApiClient(""));
  }

  start(): void {
    document.addEventListener("keydown", (event) => this.onKey(event));
    void this.tick();
    setInterval(() => void this.tick(), POLL_INTERVAL_MS);
  }

  private async tick(): Promise<void> {
    await this.controller.poll();
    this.render();
  }

  private onKey(event: KeyboardEvent): void {
    if (!this.focusedId) return;
    if (event.key === "0") {
      void this.label(this.focusedId, BACKGROUND);
    } else if (/^[1-9]$/.test(event.key)) {
      void this.label(this.focusedId, Number(event.key) - 1);
    }
  }

  private async label(requestId: string, label: number): Promise<void> {
    this.render();
    await this.controller.submit(requestId, label);
    this.render();
  }

  private render(): void {
    const stats = this.controller.stats;
    const pending = this.controller.pending();
    this.root.replaceChildren();

    const banner = document.createElement("div");
    banner.className = "stats";
    if (this.controller.offline) {
      banner.classList.add("offline");
      banner.textContent = "offline: cannot reach the annotation service";
    } else if (stats) {
      banner.textContent =
        `round ${stats.rounds} | labels ${stats.annotated_count} | ` +
        `pseudo ${stats.pseudo_count} | mAP ${stats.current_map.toFixed(3)}` +
        (stats.finished ? " | run finished" : "");
    } else {
      banner.textContent = "connecting...";
    }
    this.root.appendChild(banner);

    if (pending.length === 0) {
      const idle = document.createElement("div");
      idle.className = "idle";
      idle.textContent = this.controller.offline
        ? "waiting for connection"
        : "queue empty: waiting for the next engine round";
      this.root.appendChild(idle);
      return;
    }

    const list = document.createElement("div");
    list.className = "queue";
    for (const tracked of pending) {
      list.appendChild(this.renderItem(tracked));
    }
    this.root.appendChild(list);
  }

  private renderItem(tracked: TrackedItem): HTMLElement {
    const { item } = tracked;
    const card = document.createElement("div");
    card.className = `card ${tracked.state}`;
    card.dataset.requestId = item.request_id;
    card.tabIndex = 0;
    card.addEventListener("focus", () => {
      this.focusedId = item.request_id;
    });

    const thumb = document.createElement("img");
    thumb.className = "thumb";
    thumb.alt = `proposal ${item.proposal_id}`;
    thumb.src = `data:image/png;base64,${item.thumbnail_png_base64}`;
    // The thumbnail is the proposal crop itself, so the box outline is
    // the image border at any zoom.
    thumb.style.outline = "2px solid #e33";
    card.appendChild(thumb);

    const meta = document.createElement("div");
    meta.className = "meta";
    const score = item.s_score === null ? "n/a" : item.s_score.toFixed(4);
    meta.textContent = `${item.image_id} @ [${item.box.join(", ")}] s=${score}`;
    card.appendChild(meta);

    const buttons = document.createElement("div");
    buttons.className = "choices";
    for (const category of item.positive_categories) {
      const button = document.createElement("button");
      button.textContent = `${category + 1}: ${categoryName(category)}`;
      button.classList.add("candidate");
      button.addEventListener("click", () => void this.label(item.request_id, category));
      buttons.appendChild(button);
    }
    const none = document.createElement("button");
    none.textContent = "0: background / none";
    none.addEventListener("click", () => void this.label(item.request_id, BACKGROUND));
    buttons.appendChild(none);
    card.appendChild(buttons);

    if (tracked.error) {
      const error = document.createElement("div");
      error.className = "error";
      error.textContent = tracked.error;
      card.appendChild(error);
    }
    return card;
  }
}

const root = document.getElementById("app");
if (root) {
  new App(root).start();
}
