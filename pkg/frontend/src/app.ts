// Page assembly: one run, one stream, four panels.

import { ChartsPanel } from "./charts";
import { ControlsPanel, type ControlDefaults } from "./controls";
import type { GatewayClient, SocketLike } from "./gateway";
import { renderMap } from "./map";
import { NegotiationPanel } from "./negotiation";
import type { Command } from "./types";
import { ViewModel } from "./viewmodel";

export class App {
  readonly vm = new ViewModel();
  readonly root: HTMLElement;
  private svg: SVGSVGElement;
  private banner: HTMLElement;
  private clock: HTMLElement;
  private connBadge: HTMLElement;
  private toastBox: HTMLElement;
  private socket: SocketLike | null = null;
  private shownToasts = 0;

  constructor(
    private client: GatewayClient,
    private runId: string,
    defaults: ControlDefaults,
  ) {
    this.root = document.createElement("main");
    this.root.className = "app";

    const header = document.createElement("header");
    const title = document.createElement("h1");
    title.textContent = `run ${runId}`;
    this.connBadge = document.createElement("span");
    this.connBadge.className = "connection";
    this.clock = document.createElement("span");
    this.clock.className = "clock";
    header.append(title, this.connBadge, this.clock);
    this.root.appendChild(header);

    this.banner = document.createElement("div");
    this.banner.className = "error-banner";
    this.banner.hidden = true;
    this.root.appendChild(this.banner);

    this.toastBox = document.createElement("div");
    this.toastBox.className = "toasts";
    this.root.appendChild(this.toastBox);

    this.svg = document.createElementNS("http://www.w3.org/2000/svg", "svg");
    this.svg.setAttribute("width", "640");
    this.svg.setAttribute("height", "480");
    this.svg.setAttribute("class", "city");
    this.root.appendChild(this.svg);

    const post = (cmd: Command) => this.client.sendCommand(this.runId, cmd);
    this.root.appendChild(new ControlsPanel(this.vm, post, defaults).root);
    this.root.appendChild(new NegotiationPanel(this.vm, post).root);
    this.root.appendChild(new ChartsPanel(this.vm).root);

    this.vm.onChange(() => this.render());
  }

  async start(): Promise<void> {
    this.vm.setGeometry(await this.client.getMap(this.runId));
    this.socket = this.client.openStream(this.runId, (msg) => this.vm.ingest(msg));
    this.socket.onopen = () => this.vm.setConnection("open");
    this.socket.onclose = () => this.vm.setConnection("closed");
  }

  stop(): void {
    this.socket?.close();
  }

  render(): void {
    this.connBadge.textContent = this.vm.connection;
    this.connBadge.className = `connection ${this.vm.connection}`;
    this.clock.textContent = `t = ${this.vm.time.toFixed(0)} s`;

    this.banner.hidden = this.vm.lastError === null;
    this.banner.textContent = this.vm.lastError ?? "";

    for (; this.shownToasts < this.vm.toasts.length; this.shownToasts++) {
      const toast = document.createElement("p");
      toast.className = "toast";
      toast.textContent = this.vm.toasts[this.shownToasts];
      this.toastBox.appendChild(toast);
    }

    if (this.vm.geometry) {
      renderMap(this.svg, this.vm.geometry, this.vm.snapshot, this.vm.roadStates());
    }
  }
}
