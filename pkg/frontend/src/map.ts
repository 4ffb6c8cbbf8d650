// SVG scene of the city: roads, stops, stations with queue badges, rental
// sites, and one glyph per taxi. Pure function of (geometry, model state).

import type { MapGeometry, SimSnapshot, TaxiView } from "./types";

const SVG_NS = "http://www.w3.org/2000/svg";
const PAD = 24;

interface Projector {
  (x: number, y: number): [number, number];
}

function makeProjector(geo: MapGeometry, width: number, height: number): Projector {
  const xs = geo.nodes.map((n) => n.x);
  const ys = geo.nodes.map((n) => n.y);
  const minX = Math.min(...xs);
  const maxX = Math.max(...xs);
  const minY = Math.min(...ys);
  const maxY = Math.max(...ys);
  const spanX = Math.max(1e-9, maxX - minX);
  const spanY = Math.max(1e-9, maxY - minY);
  const scale = Math.min((width - 2 * PAD) / spanX, (height - 2 * PAD) / spanY);
  return (x, y) => [
    PAD + (x - minX) * scale,
    // flip so north is up
    height - PAD - (y - minY) * scale,
  ];
}

function el(name: string, attrs: Record<string, string | number>): SVGElement {
  const node = document.createElementNS(SVG_NS, name);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, String(v));
  return node;
}

function taxiPosition(
  taxi: TaxiView,
  geo: MapGeometry,
  nodeXY: Map<number, [number, number]>,
): [number, number] {
  if (taxi.seg !== null) {
    const seg = geo.segments.find((s) => s.id === taxi.seg);
    if (seg) {
      const a = nodeXY.get(seg.from);
      const b = nodeXY.get(seg.to);
      if (a && b) {
        const f = Math.min(1, Math.max(0, taxi.frac));
        return [a[0] + (b[0] - a[0]) * f, a[1] + (b[1] - a[1]) * f];
      }
    }
  }
  return nodeXY.get(taxi.node) ?? [0, 0];
}

export function renderMap(
  svg: SVGSVGElement,
  geo: MapGeometry,
  snapshot: SimSnapshot | null,
  roadStates: Map<number, "free" | "jammed">,
): void {
  const width = Number(svg.getAttribute("width") ?? 640);
  const height = Number(svg.getAttribute("height") ?? 480);
  const project = makeProjector(geo, width, height);
  const nodeXY = new Map<number, [number, number]>();
  for (const n of geo.nodes) nodeXY.set(n.id, project(n.x, n.y));

  svg.replaceChildren();

  const roads = el("g", { class: "roads" });
  for (const seg of geo.segments) {
    const a = nodeXY.get(seg.from);
    const b = nodeXY.get(seg.to);
    if (!a || !b) continue;
    // each direction is offset to its right so two-way pairs stay visible
    const dx = b[0] - a[0];
    const dy = b[1] - a[1];
    const len = Math.hypot(dx, dy) || 1;
    const ox = (dy / len) * 2;
    const oy = (-dx / len) * 2;
    const jammed = roadStates.get(seg.id) === "jammed";
    roads.appendChild(
      el("line", {
        x1: a[0] + ox,
        y1: a[1] + oy,
        x2: b[0] + ox,
        y2: b[1] + oy,
        class: jammed ? "segment jammed" : "segment",
        "data-seg": seg.id,
      }),
    );
  }
  svg.appendChild(roads);

  const stopsSet = new Set(geo.stops);
  const rentalSet = new Set(geo.rental_sites);
  const nodes = el("g", { class: "nodes" });
  for (const n of geo.nodes) {
    const [x, y] = nodeXY.get(n.id)!;
    const cls = stopsSet.has(n.id) ? "node stop" : "node";
    nodes.appendChild(el("circle", { cx: x, cy: y, r: stopsSet.has(n.id) ? 6 : 3, class: cls, "data-node": n.id }));
    if (rentalSet.has(n.id)) {
      nodes.appendChild(el("rect", { x: x - 9, y: y - 9, width: 18, height: 18, class: "rental-site", "data-node": n.id }));
    }
  }
  svg.appendChild(nodes);

  const stations = el("g", { class: "stations" });
  for (const st of snapshot?.stations ?? []) {
    const xy = nodeXY.get(st.node);
    if (!xy) continue;
    const [x, y] = xy;
    stations.appendChild(
      el("rect", { x: x - 7, y: y - 16, width: 14, height: 10, class: "station", "data-station": st.id }),
    );
    const badge = el("text", { x: x + 9, y: y - 8, class: "queue-badge", "data-station": st.id });
    badge.textContent = `${st.queue.length}`;
    stations.appendChild(badge);
  }
  svg.appendChild(stations);

  const taxis = el("g", { class: "taxis" });
  for (const taxi of snapshot?.taxis ?? []) {
    const [x, y] = taxiPosition(taxi, geo, nodeXY);
    const classes = ["taxi", `state-${taxi.state.toLowerCase()}`];
    if (taxi.role === "RENTAL") classes.push("rental");
    if (taxi.stranded) classes.push("stranded");
    const glyph = el("circle", { cx: x, cy: y, r: 5, class: classes.join(" "), "data-taxi": taxi.id });
    const tip = document.createElementNS(SVG_NS, "title");
    tip.textContent = `taxi ${taxi.id}: ${taxi.state}, ${taxi.battery_kwh.toFixed(2)} kWh`;
    glyph.appendChild(tip);
    taxis.appendChild(glyph);
  }
  svg.appendChild(taxis);
}
