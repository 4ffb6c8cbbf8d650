// Rolling strip charts of the three headline metrics, straight from the
// snapshot stream. No smoothing, no interpolation.

import { CHART_METRICS, type MetricPoint, type ViewModel } from "./viewmodel";

const SVG_NS = "http://www.w3.org/2000/svg";
const W = 260;
const H = 72;

const TITLES: Record<string, string> = {
  passenger_avg_wait: "passenger wait (s)",
  taxi_avg_idle: "taxi idle (s)",
  taxi_avg_queue_wait: "charge queue wait (s)",
};

function polyline(points: MetricPoint[]): string {
  if (points.length === 0) return "";
  const t0 = points[0].t;
  const t1 = Math.max(points[points.length - 1].t, t0 + 1);
  let vMax = 0;
  for (const p of points) vMax = Math.max(vMax, p.v);
  if (vMax <= 0) vMax = 1;
  return points
    .map((p) => {
      const x = ((p.t - t0) / (t1 - t0)) * (W - 8) + 4;
      const y = H - 4 - (p.v / vMax) * (H - 8);
      return `${x.toFixed(1)},${y.toFixed(1)}`;
    })
    .join(" ");
}

export class ChartsPanel {
  readonly root: HTMLElement;

  constructor(private vm: ViewModel) {
    this.root = document.createElement("section");
    this.root.className = "charts";
    vm.onChange(() => this.render());
    this.render();
  }

  render(): void {
    this.root.replaceChildren();
    for (const metric of CHART_METRICS) {
      const points = this.vm.series[metric] ?? [];
      const block = document.createElement("figure");
      block.className = "chart";
      block.dataset.metric = metric;

      const caption = document.createElement("figcaption");
      const latest = points.length ? points[points.length - 1].v : 0;
      caption.textContent = `${TITLES[metric] ?? metric}: ${latest.toFixed(1)}`;
      block.appendChild(caption);

      const svg = document.createElementNS(SVG_NS, "svg");
      svg.setAttribute("width", String(W));
      svg.setAttribute("height", String(H));
      const line = document.createElementNS(SVG_NS, "polyline");
      line.setAttribute("points", polyline(points));
      line.setAttribute("class", "series");
      svg.appendChild(line);
      block.appendChild(svg);
      this.root.appendChild(block);
    }
  }
}
