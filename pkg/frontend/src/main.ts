import { App } from "./app";
import { GatewayClient } from "./gateway";

// ?base= gateway origin, ?run= attach to an existing run (else create one),
// ?pace= virtual seconds per wall second for a new run

async function boot(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const base = params.get("base") ?? "http://127.0.0.1:8000";
  const client = new GatewayClient(base);

  let runId = params.get("run");
  if (!runId) {
    const pace = Number(params.get("pace") ?? 60);
    runId = await client.createRun({}, pace);
  }

  const snap = await client.getSnapshot(runId);
  const app = new App(client, runId, {
    fleet: snap.taxis.filter((t) => t.role === "TAXI").length,
    stations: snap.stations.length,
    rate: 1,
    carpool: false,
    leastTime: false,
    carsharing: snap.taxis.some((t) => t.role === "RENTAL"),
  });
  document.body.appendChild(app.root);
  await app.start();
}

boot().catch((err) => {
  const msg = document.createElement("pre");
  msg.textContent = `failed to start: ${err}`;
  document.body.appendChild(msg);
});
