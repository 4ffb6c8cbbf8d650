// Thin client for the control service. Both transports are injectable so
// tests drive the app against a scripted stub instead of a live server.

import type { Command, MapGeometry, SimSnapshot, StreamMessage } from "./types";

export interface ResponseLike {
  ok: boolean;
  status: number;
  json(): Promise<unknown>;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<ResponseLike>;

export interface SocketLike {
  onmessage: ((ev: { data: string }) => void) | null;
  onclose: (() => void) | null;
  onopen: (() => void) | null;
  close(): void;
}

export type SocketFactory = (url: string) => SocketLike;

export class GatewayError extends Error {
  constructor(message: string, readonly status: number) {
    super(message);
  }
}

export class GatewayClient {
  private fetchImpl: FetchLike;
  private socketFactory: SocketFactory;

  constructor(
    readonly baseUrl: string,
    opts: { fetchImpl?: FetchLike; socketFactory?: SocketFactory } = {},
  ) {
    this.fetchImpl = opts.fetchImpl ?? ((url, init) => fetch(url, init));
    this.socketFactory =
      opts.socketFactory ?? ((url) => new WebSocket(url) as unknown as SocketLike);
  }

  private async request(path: string, init?: RequestInit): Promise<unknown> {
    const res = await this.fetchImpl(this.baseUrl + path, init);
    const body = await res.json().catch(() => ({}));
    if (!res.ok) {
      const reason =
        typeof body === "object" && body !== null && "reason" in body
          ? String((body as { reason: unknown }).reason)
          : res.status === 404
            ? "run not found"
            : `gateway error ${res.status}`;
      throw new GatewayError(reason, res.status);
    }
    return body;
  }

  async createRun(config: Record<string, unknown>, pace?: number): Promise<string> {
    const body = await this.request("/runs", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(pace === undefined ? { config } : { config, pace }),
    });
    return (body as { run_id: string }).run_id;
  }

  async sendCommand(runId: string, command: Command): Promise<void> {
    await this.request(`/runs/${runId}/commands`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(command),
    });
  }

  async getSnapshot(runId: string): Promise<SimSnapshot> {
    return (await this.request(`/runs/${runId}/snapshot`)) as SimSnapshot;
  }

  async getMap(runId: string): Promise<MapGeometry> {
    return (await this.request(`/runs/${runId}/map`)) as MapGeometry;
  }

  // ws:// is derived from the HTTP base so one origin config covers both.
  openStream(runId: string, onMessage: (msg: StreamMessage) => void): SocketLike {
    const wsBase = this.baseUrl.replace(/^http/, "ws");
    const sock = this.socketFactory(`${wsBase}/runs/${runId}/stream`);
    sock.onmessage = (ev) => {
      let parsed: unknown;
      try {
        parsed = JSON.parse(ev.data);
      } catch {
        return;
      }
      if (parsed && typeof parsed === "object" && "kind" in parsed) {
        onMessage(parsed as StreamMessage);
      }
    };
    return sock;
  }
}
