import type { DecisionKind } from './types.js';

export interface PendingDecision {
  actionId: string;
  tileId: string;
  decision: DecisionKind;
  note?: string;
}

export type SubmitFn = (d: PendingDecision) => Promise<void>;

/**
 * Holds decisions the service has not acknowledged and replays them in
 * order. One user action maps to exactly one pending entry however many
 * transport attempts it takes, so nothing is ever double-submitted.
 */
export class PendingQueue {
  private pending: PendingDecision[] = [];
  private delivered = new Set<string>();
  private flushing = false;
  private counter = 0;

  constructor(private readonly submit: SubmitFn) {}

  get size(): number {
    return this.pending.length;
  }

  entries(): readonly PendingDecision[] {
    return this.pending;
  }

  newAction(tileId: string, decision: DecisionKind, note?: string): PendingDecision {
    this.counter += 1;
    return { actionId: `a${this.counter}`, tileId, decision, note };
  }

  /** Try to submit now; keep the action locally when the service fails. */
  async offer(action: PendingDecision): Promise<boolean> {
    if (this.delivered.has(action.actionId)) return true; // already on the server
    if (this.pending.some((p) => p.actionId === action.actionId)) return false;
    try {
      await this.submit(action);
      this.delivered.add(action.actionId);
      return true;
    } catch {
      this.pending.push(action);
      return false;
    }
  }

  /** Replay everything queued; stops at the first failure, keeping order. */
  async flush(): Promise<number> {
    if (this.flushing) return 0;
    this.flushing = true;
    let sent = 0;
    try {
      while (this.pending.length > 0) {
        const head = this.pending[0];
        try {
          await this.submit(head);
        } catch {
          break;
        }
        this.delivered.add(head.actionId);
        this.pending.shift();
        sent += 1;
      }
    } finally {
      this.flushing = false;
    }
    return sent;
  }
}
