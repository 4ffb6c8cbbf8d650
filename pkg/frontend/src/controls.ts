// Steering panel. Every gesture posts exactly one command; the displayed
// state commits only once the gateway streams back its command_applied echo,
// and reverts (with the gateway's reason) when the command is refused.

import type { Command } from "./types";
import type { ViewModel } from "./viewmodel";

type Post = (cmd: Command) => Promise<void>;

export interface ControlDefaults {
  fleet: number;
  stations: number;
  rate: number;
  carpool: boolean;
  leastTime: boolean;
  carsharing: boolean;
}

function label(text: string): HTMLLabelElement {
  const l = document.createElement("label");
  l.textContent = text;
  return l;
}

class ConfirmedControl<T> {
  confirmed: T;
  pending = false;

  constructor(
    readonly input: HTMLInputElement,
    initial: T,
    private read: (el: HTMLInputElement) => T,
    private write: (el: HTMLInputElement, v: T) => void,
    private command: (v: T) => Command,
    private vm: ViewModel,
    private post: Post,
  ) {
    this.confirmed = initial;
    this.write(input, initial);
    input.addEventListener("change", () => void this.submit());
  }

  private async submit(): Promise<void> {
    if (this.pending) return;
    const value = this.read(this.input);
    const cmd = this.command(value);
    this.pending = true;
    this.input.classList.add("pending");
    this.input.disabled = true;
    // the echo can beat the HTTP response on a fast step, so the waiter
    // must exist before the command is posted
    const cancel = this.vm.expectEcho(
      cmd.kind,
      () => this.settle(true, null, value),
      (reason) => this.settle(false, reason),
    );
    try {
      await this.post(cmd);
    } catch (err) {
      cancel();
      if (this.pending) {
        this.settle(false, err instanceof Error ? err.message : String(err));
      }
    }
  }

  private settle(ok: boolean, reason: string | null, value?: T): void {
    this.pending = false;
    this.input.classList.remove("pending");
    this.input.disabled = false;
    if (ok && value !== undefined) {
      this.confirmed = value;
    } else {
      this.write(this.input, this.confirmed);
      if (reason) this.vm.toast(`${this.command(this.confirmed).kind}: ${reason}`);
    }
    this.vm.publish();
  }
}

export class ControlsPanel {
  readonly root: HTMLElement;
  private controls: ConfirmedControl<unknown>[] = [];
  private buttons: HTMLButtonElement[] = [];

  constructor(
    private vm: ViewModel,
    private post: Post,
    defaults: ControlDefaults,
  ) {
    this.root = document.createElement("section");
    this.root.className = "controls";

    this.addButton("Pause", { kind: "Pause", args: {} });
    this.addButton("Resume", { kind: "Resume", args: {} });

    this.addSlider("Fleet size", "fleet", 1, 30, 1, defaults.fleet, (v) => ({
      kind: "SetFleetSize",
      args: { size: v },
    }));
    this.addSlider("Charging stations", "stations", 1, 12, 1, defaults.stations, (v) => ({
      kind: "SetStationCount",
      args: { count: v },
    }));
    this.addSlider("Demand rate x", "rate", 0.25, 4, 0.25, defaults.rate, (v) => ({
      kind: "SetGenerationRate",
      args: { multiplier: v },
    }));

    this.addToggle("Car-pooling", "carpool", defaults.carpool, (v) => ({
      kind: "SetPolicy",
      args: { carpool: v },
    }));
    this.addToggle("Least-time routing", "least-time", defaults.leastTime, (v) => ({
      kind: "SetPolicy",
      args: { path_policy: v ? "least_time" : "shortest_distance" },
    }));

    if (defaults.carsharing) {
      const badge = document.createElement("span");
      badge.className = "badge carsharing";
      badge.textContent = "car-sharing on (fixed for this run)";
      this.root.appendChild(badge);
    }

    vm.onChange(() => this.sync());
    this.sync();
  }

  private addButton(text: string, cmd: Command): void {
    const btn = document.createElement("button");
    btn.textContent = text;
    btn.dataset.command = cmd.kind;
    btn.addEventListener("click", () => {
      void this.post(cmd).catch((err) => {
        this.vm.toast(`${cmd.kind}: ${err instanceof Error ? err.message : err}`);
      });
    });
    this.buttons.push(btn);
    this.root.appendChild(btn);
  }

  private addSlider(
    text: string,
    name: string,
    min: number,
    max: number,
    step: number,
    initial: number,
    command: (v: number) => Command,
  ): void {
    const wrap = label(text);
    const input = document.createElement("input");
    input.type = "range";
    input.min = String(min);
    input.max = String(max);
    input.step = String(step);
    input.dataset.control = name;
    const value = document.createElement("output");
    value.dataset.value = name;
    const ctl = new ConfirmedControl<number>(
      input,
      initial,
      (el) => Number(el.value),
      (el, v) => {
        el.value = String(v);
        value.textContent = String(v);
      },
      command,
      this.vm,
      this.post,
    );
    input.addEventListener("input", () => (value.textContent = input.value));
    this.controls.push(ctl as ConfirmedControl<unknown>);
    wrap.append(input, value);
    this.root.appendChild(wrap);
  }

  private addToggle(
    text: string,
    name: string,
    initial: boolean,
    command: (v: boolean) => Command,
  ): void {
    const wrap = label(text);
    const input = document.createElement("input");
    input.type = "checkbox";
    input.dataset.control = name;
    const badge = document.createElement("span");
    badge.className = "badge";
    badge.dataset.badge = name;
    const ctl = new ConfirmedControl<boolean>(
      input,
      initial,
      (el) => el.checked,
      (el, v) => {
        el.checked = v;
        badge.textContent = v ? "on" : "off";
        badge.classList.toggle("on", v);
      },
      command,
      this.vm,
      this.post,
    );
    this.controls.push(ctl as ConfirmedControl<unknown>);
    wrap.append(input, badge);
    this.root.appendChild(wrap);
  }

  /** Connection gate: no gestures while the stream is down. */
  sync(): void {
    const offline = this.vm.connection !== "open";
    for (const btn of this.buttons) btn.disabled = offline;
    for (const ctl of this.controls) {
      ctl.input.disabled = offline || ctl.pending;
    }
  }
}
