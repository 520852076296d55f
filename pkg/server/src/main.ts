/**
 * Stdio entry point: `node dist/main.js --annotations file.json`.
 *
 * Serves oracle answers for one image's ground truth over protocol v1.
 * Malformed lines and unknown ops get an error response; the process exits
 * only on shutdown or when stdin closes. A real model server would replace
 * the oracle module while keeping this transport untouched.
 */

import { createInterface } from "node:readline";
import { loadAnnotations } from "./annotations.js";
import { buildOracle } from "./oracle.js";
import { handleRequest } from "./protocol.js";

function parseArgs(argv: string[]): { annotations: string } {
  let annotations: string | null = null;
  for (let i = 0; i < argv.length; i++) {
    if (argv[i] === "--annotations") {
      annotations = argv[i + 1] ?? null;
      i++;
    }
  }
  if (!annotations) {
    process.stderr.write("usage: main.js --annotations <file.json>\n");
    process.exit(2);
  }
  return { annotations };
}

async function main(): Promise<void> {
  const { annotations } = parseArgs(process.argv.slice(2));
  let state;
  try {
    state = buildOracle(loadAnnotations(annotations));
  } catch (e) {
    process.stderr.write(`failed to load ${annotations}: ${e}\n`);
    process.exit(2);
  }

  const rl = createInterface({ input: process.stdin });
  for await (const line of rl) {
    if (!line.trim()) continue;
    let response;
    let shutdown = false;
    try {
      const msg = JSON.parse(line);
      if (typeof msg !== "object" || msg === null) {
        response = { id: null, status: "error", error_msg: "request is not an object" };
      } else {
        response = handleRequest(state, msg);
        shutdown = msg.op === "shutdown" && response.status === "ok";
      }
    } catch (e) {
      response = { id: null, status: "error", error_msg: `malformed request: ${e}` };
    }
    process.stdout.write(JSON.stringify(response) + "\n");
    if (shutdown) {
      rl.close();
      process.stdin.destroy();
      return;
    }
  }
}

main().catch((e) => {
  process.stderr.write(`fatal: ${e}\n`);
  process.exit(1);
});
