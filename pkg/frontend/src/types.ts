// Wire types, mirroring the gateway's JSON payloads one to one.

export interface TaxiView {
  id: number;
  role: string;
  state: string;
  node: number;
  seg: number | null;
  frac: number;
  battery_kwh: number;
  onboard: number[];
  plan: [number, string, number][];
  retiring: boolean;
  stranded: boolean;
}

export interface StationView {
  id: number;
  node: number;
  chargers: number;
  queue: number[];
  charging: number[];
  committed: number;
}

export interface RoadView {
  seg: number;
  occupancy: number;
  state: "free" | "jammed";
}

export interface RequestView {
  id: number;
  status: string;
  origin: number;
  dest: number;
  called_at: number;
  taxi: number | null;
}

export interface SimSnapshot {
  time: number;
  taxis: TaxiView[];
  stations: StationView[];
  roads: RoadView[];
  requests: RequestView[];
  metrics: Record<string, number>;
}

export interface MapGeometry {
  nodes: { id: number; x: number; y: number }[];
  segments: { id: number; from: number; to: number; length_m: number }[];
  stops: number[];
  rental_sites: number[];
}

export type StreamMessage =
  | { kind: "snapshot"; payload: { t: number; snapshot: SimSnapshot } }
  | { kind: "jam"; payload: { t: number; seg: number; state: "free" | "jammed" } }
  | {
      kind: "prompt";
      payload: {
        t: number;
        prompt: number;
        rid: number;
        choices: string[];
        default: string;
        timeout_s: number;
      };
    }
  | {
      kind: "command_applied";
      payload: {
        t: number;
        index: number;
        command: string;
        ok: boolean;
        reason?: string;
      };
    };

export interface Command {
  kind: string;
  args: Record<string, unknown>;
  t?: number;
}

export type NegotiationChoice = "KEEP_WAITING" | "OFFER_CARPOOL" | "CANCEL_REQUEST";

export const NEGOTIATION_CHOICES: NegotiationChoice[] = [
  "KEEP_WAITING",
  "OFFER_CARPOOL",
  "CANCEL_REQUEST",
];
