// Page bootstrap: wire the socket client, the attack form, and the
// animation-frame render loop together.

import { DashboardClient, endpointFromOrigin } from "./client.js";
import { DashboardState } from "./state.js";
import { fieldVisibility, renderAll, type ViewRefs } from "./render.js";
import type { AttackForm, AttackMethod, Direction, LpNorm } from "./wire.js";

function byId<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (el === null) throw new Error(`missing element #${id}`);
  return el as T;
}

function collectRefs(): ViewRefs {
  return {
    connDot: byId("conn-dot"),
    connText: byId("conn-text"),
    cleanImg: byId<HTMLImageElement>("img-clean"),
    perturbedImg: byId<HTMLImageElement>("img-perturbed"),
    perturbationImg: byId<HTMLImageElement>("img-perturbation"),
    previewCaption: byId("preview-caption"),
    staleBadge: byId("stale-badge"),
    metricsBody: byId("metrics-body"),
    attackLine: byId("attack-line"),
    errorLine: byId("error-line"),
    gaugeCanvas: byId<HTMLCanvasElement>("gauge"),
    chartCanvas: byId<HTMLCanvasElement>("chart"),
    submitButton: byId<HTMLButtonElement>("attack-submit"),
  };
}

function readForm(): AttackForm {
  const method = byId<HTMLSelectElement>("field-method").value as AttackMethod;
  const direction = byId<HTMLSelectElement>("field-direction").value as Direction;
  const p: LpNorm = byId<HTMLSelectElement>("field-p").value === "inf" ? "inf" : 2;
  const epsilon = Number(byId<HTMLInputElement>("field-epsilon").value);
  const xi = Number(byId<HTMLInputElement>("field-xi").value);
  return { method, direction, epsilon, p, xi };
}

function syncFieldVisibility(): void {
  const method = byId<HTMLSelectElement>("field-method").value as AttackMethod;
  const visible = fieldVisibility(method);
  byId("row-direction").hidden = !visible.direction;
  byId("row-epsilon").hidden = !visible.epsilon;
  byId("row-p").hidden = !visible.p;
  byId("row-xi").hidden = !visible.xi;
}

window.addEventListener("load", () => {
  const refs = collectRefs();
  const state = new DashboardState();
  const client = new DashboardClient(endpointFromOrigin(location.origin), state);

  let dirty = true;
  state.onChange(() => {
    dirty = true;
  });

  const form = byId<HTMLFormElement>("attack-form");
  const hint = byId("form-hint");
  byId<HTMLSelectElement>("field-method").addEventListener("change", syncFieldVisibility);
  form.addEventListener("submit", (event) => {
    event.preventDefault();
    const result = client.sendAttack(readForm());
    hint.textContent = result.ok ? "" : result.reason;
  });
  syncFieldVisibility();

  let staleShown = false;
  const frame = (): void => {
    const staleNow = state.previewStale();
    if (dirty || staleNow !== staleShown) {
      renderAll(refs, state);
      staleShown = staleNow;
      dirty = false;
    }
    requestAnimationFrame(frame);
  };
  requestAnimationFrame(frame);

  client.connect();
});
