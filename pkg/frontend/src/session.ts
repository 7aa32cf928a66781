// Headless scripted annotation session: drives the same ApiClient and
// QueueController the browser UI uses, labeling every pending request
// with its first candidate category (or background when none), until the
// engine reports the run finished. Prints the submissions as JSON.
//
// Usage: node dist/session.js http://127.0.0.1:PORT [maxSeconds]

import { ApiClient, BACKGROUND } from "./api.js";
import { QueueController } from "./controller.js";

declare const process: {
  argv: string[];
  exit(code?: number): never;
};

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

async function main(): Promise<void> {
  const base = process.argv[2];
  const maxSeconds = Number(process.argv[3] ?? "120");
  if (!base) {
    console.error("usage: node session.js <base-url> [maxSeconds]");
    process.exit(2);
  }
  const controller = new QueueController(new ApiClient(base));
  const submitted: Array<{ request_id: string; label: number }> = [];
  const deadline = Date.now() + maxSeconds * 1000;
  let sawQueue = false;
  while (Date.now() < deadline) {
    await controller.poll();
    if (controller.stats?.finished) {
      break;
    }
    const pending = controller.pending();
    if (pending.length > 0) {
      sawQueue = true;
    }
    for (const tracked of pending) {
      const categories = tracked.item.positive_categories;
      const label = categories.length > 0 ? categories[0] : BACKGROUND;
      const state = await controller.submit(tracked.item.request_id, label);
      if (state === "done") {
        submitted.push({ request_id: tracked.item.request_id, label });
      }
    }
    await sleep(250);
  }
  console.log(JSON.stringify({ saw_queue: sawQueue, submitted }));
  process.exit(0);
}

main().catch((err) => {
  console.error(String(err));
  process.exit(1);
});
