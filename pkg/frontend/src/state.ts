// Dashboard state: the single source of truth the renderer reads from.
//
// Every number shown in the UI is stored here exactly as it arrived in a
// server message; nothing is recomputed client side.  The only way attack
// state changes is the server acknowledging an attack message with a
// status broadcast.

import type {
  ErrorMessage,
  PreviewMessage,
  StatusMessage,
} from "./wire.js";

export type ConnectionState = "connecting" | "connected" | "disconnected";

export interface DeviationPoint {
  /** Frame count since the attack was engaged, from the status metrics. */
  frames: number;
  /** Mean absolute steering deviation, verbatim from the status metrics. */
  absDev: number;
}

/** Previews older than this are flagged as stale in the UI. */
export const STALE_PREVIEW_MS = 2000;

/** The deviation chart keeps roughly this many frames of history. */
export const WINDOW_FRAMES = 300;

export class DashboardState {
  connection: ConnectionState = "connecting";
  status: StatusMessage | null = null;
  preview: PreviewMessage | null = null;
  previewReceivedAt = 0;
  lastError: ErrorMessage | null = null;
  /** True between sending an attack and the server's status echo. */
  awaitingEcho = false;
  /** Rolling deviation history, oldest first. */
  deviations: DeviationPoint[] = [];

  private listeners: Array<() => void> = [];
  private readonly now: () => number;

  constructor(now: () => number = () => Date.now()) {
    this.now = now;
  }

  onChange(listener: () => void): void {
    this.listeners.push(listener);
  }

  private notify(): void {
    for (const listener of this.listeners) listener();
  }

  setConnection(connection: ConnectionState): void {
    this.connection = connection;
    if (connection !== "connected") {
      // A pending command cannot be echoed on a dead socket; let the user
      // resubmit once the connection is back.
      this.awaitingEcho = false;
    }
    this.notify();
  }

  applyStatus(message: StatusMessage): void {
    this.status = message;
    this.awaitingEcho = false;
    this.pushDeviation(message);
    this.notify();
  }

  applyPreview(message: PreviewMessage): void {
    this.preview = message;
    this.previewReceivedAt = this.now();
    this.notify();
  }

  applyError(message: ErrorMessage): void {
    this.lastError = message;
    // A rejected command will never be echoed; re-enable the form.
    this.awaitingEcho = false;
    this.notify();
  }

  markAttackSent(): void {
    this.awaitingEcho = true;
    this.lastError = null;
    this.notify();
  }

  /** True when a preview exists but has not been refreshed recently. */
  previewStale(): boolean {
    return (
      this.preview !== null &&
      this.now() - this.previewReceivedAt > STALE_PREVIEW_MS
    );
  }

  private pushDeviation(message: StatusMessage): void {
    const { frames, abs_dev: absDev } = message.metrics;
    const last = this.deviations[this.deviations.length - 1];
    if (last !== undefined && frames < last.frames) {
      // The frame counter restarted: a new attack was engaged and the
      // server reset its metrics, so the old curve no longer applies.
      this.deviations = [];
    }
    this.deviations.push({ frames, absDev });
    const cutoff = frames - WINDOW_FRAMES;
    while (this.deviations.length > 0 && this.deviations[0].frames < cutoff) {
      this.deviations.shift();
    }
  }
}
