// Communication window: long-waiting passengers escalate here and the
// operator answers (or lets the countdown hand it to the default).

import type { Command } from "./types";
import type { PromptEntry, ViewModel } from "./viewmodel";

type Post = (cmd: Command) => Promise<void>;

export class NegotiationPanel {
  readonly root: HTMLElement;
  private inFlight = new Set<number>();

  constructor(
    private vm: ViewModel,
    private post: Post,
  ) {
    this.root = document.createElement("section");
    this.root.className = "negotiation";
    vm.onChange(() => this.render());
    this.render();
  }

  private async reply(prompt: PromptEntry, choice: string): Promise<void> {
    if (this.inFlight.has(prompt.id) || prompt.resolution !== null) return;
    this.inFlight.add(prompt.id);
    this.render();
    try {
      await this.post({
        kind: "NegotiationReply",
        args: { prompt: prompt.id, choice },
      });
      this.vm.markReplied(prompt.id, choice);
    } catch (err) {
      this.vm.toast(
        `NegotiationReply: ${err instanceof Error ? err.message : err}`,
      );
    } finally {
      this.inFlight.delete(prompt.id);
      this.render();
    }
  }

  render(): void {
    this.root.replaceChildren();
    const heading = document.createElement("h2");
    heading.textContent = "Negotiation";
    this.root.appendChild(heading);

    if (this.vm.prompts.length === 0) {
      const quiet = document.createElement("p");
      quiet.className = "quiet";
      quiet.textContent = "no passenger is waiting on you";
      this.root.appendChild(quiet);
      return;
    }

    for (const p of this.vm.prompts) {
      const card = document.createElement("article");
      card.className = "prompt";
      card.dataset.prompt = String(p.id);

      const head = document.createElement("p");
      const waited =
        p.calledAt !== null ? Math.round(this.vm.time - p.calledAt) : null;
      head.textContent =
        `request ${p.rid}` +
        (p.origin !== null ? `: stop ${p.origin} to ${p.dest}` : "") +
        (waited !== null ? `, waiting ${waited} s` : "");
      card.appendChild(head);

      if (p.resolution === null) {
        const countdown = document.createElement("span");
        countdown.className = "countdown";
        countdown.textContent = `${Math.ceil(this.vm.remainingSeconds(p))} s`;
        card.appendChild(countdown);
        for (const choice of p.choices) {
          const btn = document.createElement("button");
          btn.textContent = choice.replaceAll("_", " ").toLowerCase();
          btn.dataset.choice = choice;
          btn.disabled =
            this.inFlight.has(p.id) || this.vm.connection !== "open";
          btn.addEventListener("click", () => void this.reply(p, choice));
          card.appendChild(btn);
        }
      } else if (p.resolution.how === "replied") {
        const done = document.createElement("p");
        done.className = "resolution";
        done.textContent = `replied: ${p.resolution.choice}`;
        card.appendChild(done);
      } else {
        const done = document.createElement("p");
        done.className = "resolution defaulted";
        done.textContent = `default applied: ${p.defaultChoice}`;
        card.appendChild(done);
      }

      if (p.notice) {
        const note = document.createElement("p");
        note.className = "notice";
        note.textContent = p.notice;
        card.appendChild(note);
      }
      this.root.appendChild(card);
    }
  }
}
