// View-model helpers and canvas painters.
//
// The pure helpers (formatNumber, metricsRows, gaugeModel, attackSummary,
// fieldVisibility) translate server payloads into displayable values
// without recomputing any metric; the painters put them on screen.

import type { DeviationPoint } from "./state.js";
import { DashboardState } from "./state.js";
import type { AttackEcho, AttackMethod, StatusMessage } from "./wire.js";

/** Display formatting only: integers verbatim, floats to four digits. */
export function formatNumber(value: number | null | undefined): string {
  if (value === null || value === undefined) return "n/a";
  if (Number.isInteger(value)) return String(value);
  return value.toPrecision(4);
}

export interface MetricRow {
  label: string;
  value: string;
}

/** One row per metrics field, values straight from the status payload. */
export function metricsRows(status: StatusMessage | null): MetricRow[] {
  const m = status?.metrics;
  return [
    { label: "mean abs deviation", value: formatNumber(m?.abs_dev) },
    { label: "relative deviation %", value: formatNumber(m?.rel_dev_pct) },
    { label: "deviation RMSE", value: formatNumber(m?.rmse) },
    { label: "frames since attack", value: formatNumber(m?.frames) },
    { label: "first off-road frame", value: formatNumber(m?.off_road_frame) },
    { label: "mean latency (ms)", value: formatNumber(m?.mean_latency_ms) },
  ];
}

/** Compact one-line summary of the active attack configuration. */
export function attackSummary(attack: AttackEcho | null | undefined): string {
  if (!attack) return "no attack data";
  const parts: string[] = [attack.method];
  if (attack.direction !== undefined) parts.push(`direction=${attack.direction}`);
  if (attack.epsilon !== undefined) parts.push(`epsilon=${formatNumber(attack.epsilon)}`);
  if (attack.p !== undefined) parts.push(`p=${attack.p}`);
  if (attack.xi !== undefined) parts.push(`xi=${formatNumber(attack.xi)}`);
  if (attack.seed !== undefined) parts.push(`seed=${attack.seed}`);
  if (attack.learning_ms !== undefined) {
    parts.push(`learned in ${formatNumber(attack.learning_ms)} ms`);
  }
  if (attack.eta_norm !== undefined) {
    parts.push(`perturbation norm ${formatNumber(attack.eta_norm)}`);
  }
  return parts.join(" · ");
}

export interface GaugeModel {
  /** Mean abs deviation from the status metrics, sign from the direction. */
  value: number;
  /** False when the attack has no direction (none/random): show a band. */
  directed: boolean;
}

/**
 * Gauge inputs.  Viewers receive aggregate metrics rather than per-frame
 * steering, so the attacked needle shows the running mean deviation,
 * deflected toward the attack's configured direction.
 */
export function gaugeModel(status: StatusMessage | null): GaugeModel | null {
  if (status === null) return null;
  const dev = status.metrics.abs_dev;
  const direction = status.attack.direction;
  if (direction === "right") return { value: dev, directed: true };
  if (direction === "left") return { value: -dev, directed: true };
  return { value: dev, directed: false };
}

/** Which form fields apply to each attack method. */
export function fieldVisibility(method: AttackMethod): {
  direction: boolean;
  epsilon: boolean;
  p: boolean;
  xi: boolean;
} {
  switch (method) {
    case "none":
      return { direction: false, epsilon: false, p: false, xi: false };
    case "random":
      return { direction: false, epsilon: true, p: true, xi: false };
    case "fgsmr":
      return { direction: true, epsilon: true, p: false, xi: false };
    case "uapr":
      return { direction: true, epsilon: false, p: true, xi: true };
  }
}

// ---------------------------------------------------------------------------
// Canvas painters (DOM-dependent; exercised in the browser, not unit tests).

const GAUGE_RANGE = 1.0; // steering command range is [-1, 1]

export function drawGauge(canvas: HTMLCanvasElement, model: GaugeModel | null): void {
  const ctx = canvas.getContext("2d");
  if (ctx === null) return;
  const w = canvas.width;
  const h = canvas.height;
  const cx = w / 2;
  const cy = h - 12;
  const radius = Math.min(w / 2 - 10, h - 24);
  ctx.clearRect(0, 0, w, h);

  const angleOf = (v: number): number => {
    const clamped = Math.max(-GAUGE_RANGE, Math.min(GAUGE_RANGE, v));
    return -Math.PI / 2 + (clamped / GAUGE_RANGE) * (Math.PI / 2);
  };

  // Dial arc and ticks.
  ctx.strokeStyle = "#334";
  ctx.lineWidth = 2;
  ctx.beginPath();
  ctx.arc(cx, cy, radius, -Math.PI, 0);
  ctx.stroke();
  ctx.fillStyle = "#99a";
  ctx.font = "10px sans-serif";
  ctx.textAlign = "center";
  for (const tick of [-1, -0.5, 0, 0.5, 1]) {
    const a = angleOf(tick) - Math.PI / 2;
    const x1 = cx + Math.cos(a) * (radius - 6);
    const y1 = cy + Math.sin(a) * (radius - 6);
    const x2 = cx + Math.cos(a) * radius;
    const y2 = cy + Math.sin(a) * radius;
    ctx.beginPath();
    ctx.moveTo(x1, y1);
    ctx.lineTo(x2, y2);
    ctx.stroke();
    ctx.fillText(String(tick), cx + Math.cos(a) * (radius + 10), cy + Math.sin(a) * (radius + 10) + 3);
  }

  const needle = (value: number, color: string, width: number): void => {
    const a = angleOf(value) - Math.PI / 2;
    ctx.strokeStyle = color;
    ctx.lineWidth = width;
    ctx.beginPath();
    ctx.moveTo(cx, cy);
    ctx.lineTo(cx + Math.cos(a) * (radius - 10), cy + Math.sin(a) * (radius - 10));
    ctx.stroke();
  };

  // Clean reference needle sits at zero deviation.
  needle(0, "#8fa", 2);

  if (model === null) return;
  if (model.directed) {
    needle(model.value, "#f66", 3);
  } else if (model.value > 0) {
    // Directionless attack: shade the symmetric deviation band.
    const a1 = angleOf(-model.value) - Math.PI / 2;
    const a2 = angleOf(model.value) - Math.PI / 2;
    ctx.fillStyle = "rgba(255, 160, 64, 0.35)";
    ctx.beginPath();
    ctx.moveTo(cx, cy);
    ctx.arc(cx, cy, radius - 10, a1, a2);
    ctx.closePath();
    ctx.fill();
  }
}

export function drawChart(canvas: HTMLCanvasElement, points: DeviationPoint[]): void {
  const ctx = canvas.getContext("2d");
  if (ctx === null) return;
  const w = canvas.width;
  const h = canvas.height;
  const padL = 36;
  const padB = 18;
  const padT = 8;
  ctx.clearRect(0, 0, w, h);

  ctx.strokeStyle = "#334";
  ctx.lineWidth = 1;
  ctx.beginPath();
  ctx.moveTo(padL, padT);
  ctx.lineTo(padL, h - padB);
  ctx.lineTo(w - 4, h - padB);
  ctx.stroke();

  if (points.length === 0) {
    ctx.fillStyle = "#778";
    ctx.font = "12px sans-serif";
    ctx.textAlign = "center";
    ctx.fillText("waiting for status updates", w / 2, h / 2);
    return;
  }

  const maxDev = Math.max(0.05, ...points.map((p) => p.absDev));
  const lastFrame = points[points.length - 1].frames;
  const firstFrame = Math.max(0, lastFrame - 300);
  const span = Math.max(1, lastFrame - firstFrame);
  const xOf = (f: number): number => padL + ((f - firstFrame) / span) * (w - padL - 8);
  const yOf = (d: number): number => h - padB - (d / maxDev) * (h - padT - padB);

  ctx.fillStyle = "#99a";
  ctx.font = "10px sans-serif";
  ctx.textAlign = "right";
  ctx.fillText(maxDev.toPrecision(2), padL - 4, yOf(maxDev) + 8);
  ctx.fillText("0", padL - 4, yOf(0));
  ctx.textAlign = "center";
  ctx.fillText(`frame ${lastFrame}`, w - 40, h - 4);

  ctx.strokeStyle = "#6cf";
  ctx.lineWidth = 2;
  ctx.beginPath();
  points.forEach((p, i) => {
    if (i === 0) ctx.moveTo(xOf(p.frames), yOf(p.absDev));
    else ctx.lineTo(xOf(p.frames), yOf(p.absDev));
  });
  ctx.stroke();
}

// ---------------------------------------------------------------------------
// Full-page renderer.

export interface ViewRefs {
  connDot: HTMLElement;
  connText: HTMLElement;
  cleanImg: HTMLImageElement;
  perturbedImg: HTMLImageElement;
  perturbationImg: HTMLImageElement;
  previewCaption: HTMLElement;
  staleBadge: HTMLElement;
  metricsBody: HTMLElement;
  attackLine: HTMLElement;
  errorLine: HTMLElement;
  gaugeCanvas: HTMLCanvasElement;
  chartCanvas: HTMLCanvasElement;
  submitButton: HTMLButtonElement;
}

const CONNECTION_TEXT = {
  connecting: "connecting…",
  connected: "connected",
  disconnected: "disconnected — retrying",
} as const;

export function renderAll(refs: ViewRefs, state: DashboardState): void {
  refs.connDot.className = `dot ${state.connection}`;
  refs.connText.textContent = CONNECTION_TEXT[state.connection];

  const preview = state.preview;
  if (preview !== null && refs.cleanImg.dataset.frame !== String(preview.frame_id)) {
    refs.cleanImg.src = `data:image/png;base64,${preview.clean}`;
    refs.perturbedImg.src = `data:image/png;base64,${preview.perturbed}`;
    refs.perturbationImg.src = `data:image/png;base64,${preview.perturbation}`;
    refs.cleanImg.dataset.frame = String(preview.frame_id);
  }
  refs.previewCaption.textContent =
    preview === null ? "waiting for camera frames" : `frame ${preview.frame_id}`;
  refs.staleBadge.hidden = !state.previewStale();

  const rows = metricsRows(state.status);
  refs.metricsBody.replaceChildren(
    ...rows.map(({ label, value }) => {
      const tr = document.createElement("tr");
      const th = document.createElement("th");
      th.textContent = label;
      const td = document.createElement("td");
      td.textContent = value;
      tr.append(th, td);
      return tr;
    }),
  );

  refs.attackLine.textContent = state.status
    ? attackSummary(state.status.attack)
    : "no attack data";
  refs.errorLine.textContent = state.lastError
    ? `server error [${state.lastError.code}]: ${state.lastError.detail}`
    : "";

  refs.submitButton.disabled =
    state.awaitingEcho || state.connection !== "connected";

  drawGauge(refs.gaugeCanvas, gaugeModel(state.status));
  drawChart(refs.chartCanvas, state.deviations);
}
