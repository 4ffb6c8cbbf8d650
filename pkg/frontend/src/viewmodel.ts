// Client-side state. Everything here is a digest of gateway messages; the
// model never advances the world on its own.

import type { MapGeometry, SimSnapshot, StreamMessage } from "./types";

export type ConnectionState = "connecting" | "open" | "closed";

export interface PromptEntry {
  id: number;
  rid: number;
  issuedAt: number;
  timeoutS: number;
  choices: string[];
  defaultChoice: string;
  origin: number | null;
  dest: number | null;
  calledAt: number | null;
  resolution: null | { how: "replied"; choice: string } | { how: "defaulted" };
  notice: string | null;
}

export interface MetricPoint {
  t: number;
  v: number;
}

const SERIES_CAP = 720;
export const CHART_METRICS = [
  "passenger_avg_wait",
  "taxi_avg_idle",
  "taxi_avg_queue_wait",
] as const;

interface PendingEcho {
  onOk: () => void;
  onFail: (reason: string) => void;
}

function validSnapshot(raw: unknown): raw is SimSnapshot {
  if (!raw || typeof raw !== "object") return false;
  const s = raw as Record<string, unknown>;
  return (
    typeof s.time === "number" &&
    Array.isArray(s.taxis) &&
    Array.isArray(s.stations) &&
    Array.isArray(s.roads) &&
    Array.isArray(s.requests) &&
    !!s.metrics &&
    typeof s.metrics === "object"
  );
}

export class ViewModel {
  snapshot: SimSnapshot | null = null;
  geometry: MapGeometry | null = null;
  time = 0;
  connection: ConnectionState = "connecting";
  lastError: string | null = null;
  toasts: string[] = [];
  prompts: PromptEntry[] = [];
  series: Record<string, MetricPoint[]> = {};
  // jam flips reported since the last full snapshot; the next snapshot
  // carries the same truth and clears them
  jamOverrides = new Map<number, "free" | "jammed">();

  private pendingEchoes = new Map<string, PendingEcho[]>();
  private listeners: (() => void)[] = [];

  constructor() {
    for (const m of CHART_METRICS) this.series[m] = [];
  }

  onChange(fn: () => void): void {
    this.listeners.push(fn);
  }

  publish(): void {
    for (const fn of this.listeners) fn();
  }

  setConnection(state: ConnectionState): void {
    this.connection = state;
    this.publish();
  }

  setGeometry(geo: MapGeometry): void {
    this.geometry = geo;
    this.publish();
  }

  toast(text: string): void {
    this.toasts.push(text);
    this.publish();
  }

  /**
   * Register a waiter for the next command_applied echo of this kind.
   * Returns a cancel handle for when the POST itself is refused and no
   * echo will ever come.
   */
  expectEcho(kind: string, onOk: () => void, onFail: (reason: string) => void): () => void {
    const waiter = { onOk, onFail };
    const list = this.pendingEchoes.get(kind) ?? [];
    list.push(waiter);
    this.pendingEchoes.set(kind, list);
    return () => {
      const live = this.pendingEchoes.get(kind);
      const at = live?.indexOf(waiter) ?? -1;
      if (live && at >= 0) live.splice(at, 1);
    };
  }

  ingest(msg: StreamMessage): void {
    const t = msg.payload?.t;
    if (typeof t === "number" && t > this.time) this.time = t;

    switch (msg.kind) {
      case "snapshot": {
        const snap = msg.payload.snapshot;
        if (!validSnapshot(snap)) {
          this.lastError = "malformed snapshot from gateway";
          break;
        }
        this.lastError = null;
        this.snapshot = snap;
        this.jamOverrides.clear();
        for (const m of CHART_METRICS) {
          const v = snap.metrics[m];
          if (typeof v === "number") {
            const buf = this.series[m];
            buf.push({ t: snap.time, v });
            if (buf.length > SERIES_CAP) buf.shift();
          }
        }
        break;
      }
      case "jam":
        this.jamOverrides.set(msg.payload.seg, msg.payload.state);
        break;
      case "prompt": {
        const p = msg.payload;
        const req = this.snapshot?.requests.find((r) => r.id === p.rid);
        this.prompts.push({
          id: p.prompt,
          rid: p.rid,
          issuedAt: p.t,
          timeoutS: p.timeout_s,
          choices: p.choices,
          defaultChoice: p.default,
          origin: req?.origin ?? null,
          dest: req?.dest ?? null,
          calledAt: req?.called_at ?? null,
          resolution: null,
          notice: null,
        });
        break;
      }
      case "command_applied": {
        const { command, ok, reason } = msg.payload;
        const list = this.pendingEchoes.get(command);
        const waiter = list?.shift();
        if (waiter) {
          if (ok) waiter.onOk();
          else waiter.onFail(reason ?? "rejected");
        } else if (command === "NegotiationReply" && !ok) {
          // a timeout beat the click, or the request resolved on its own
          const open = this.prompts.find((p) => p.resolution?.how === "replied" && !p.notice);
          if (open) open.notice = reason ?? "reply arrived late";
        }
        break;
      }
    }
    this.expirePrompts();
    this.publish();
  }

  /** Virtual-time countdown; at zero the engine applied the default. */
  remainingSeconds(p: PromptEntry): number {
    return Math.max(0, p.issuedAt + p.timeoutS - this.time);
  }

  private expirePrompts(): void {
    for (const p of this.prompts) {
      if (p.resolution === null && this.remainingSeconds(p) <= 0) {
        p.resolution = { how: "defaulted" };
      }
    }
  }

  markReplied(promptId: number, choice: string): void {
    const p = this.prompts.find((e) => e.id === promptId);
    if (p && p.resolution === null) {
      p.resolution = { how: "replied", choice };
      this.publish();
    }
  }

  /** Road state for styling: snapshot truth plus any fresher jam flips. */
  roadStates(): Map<number, "free" | "jammed"> {
    const states = new Map<number, "free" | "jammed">();
    for (const r of this.snapshot?.roads ?? []) states.set(r.seg, r.state);
    for (const [seg, state] of this.jamOverrides) states.set(seg, state);
    return states;
  }
}
