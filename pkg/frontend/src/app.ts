import { ApiClient, ApiError } from './api.js';
import { ReviewQueue } from './queue.js';
import { PendingQueue } from './retry.js';
import type { DecisionKind, Progress, TileDetail, TilePayload } from './types.js';

const KEY_BINDINGS: Record<string, DecisionKind> = {
  c: 'curate',
  e: 'exclude',
  z: 'zero',
};

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

export class App {
  private api: ApiClient;
  private queue: ReviewQueue = new ReviewQueue([]);
  private pending: PendingQueue;
  private annotator = 'annotator';
  private showPoints = true;

  constructor(base = '') {
    this.api = new ApiClient(base);
    this.pending = new PendingQueue(async (d) => {
      await this.api.postDecision(d.tileId, d.decision, this.annotator, d.note);
    });
  }

  async start(): Promise<void> {
    this.annotator =
      window.localStorage.getItem('annotator') ??
      window.prompt('annotator name?', 'annotator') ??
      'annotator';
    window.localStorage.setItem('annotator', this.annotator);
    el<HTMLElement>('annotator').textContent = this.annotator;

    document.addEventListener('keydown', (ev) => this.onKey(ev));
    el<HTMLButtonElement>('btn-curate').onclick = () => this.decide('curate');
    el<HTMLButtonElement>('btn-exclude').onclick = () => this.decide('exclude');
    el<HTMLButtonElement>('btn-zero').onclick = () => this.decide('zero');
    el<HTMLButtonElement>('btn-skip').onclick = () => {
      this.queue.advance();
      void this.render();
    };
    el<HTMLButtonElement>('btn-points').onclick = () => {
      this.showPoints = !this.showPoints;
      void this.render();
    };
    window.addEventListener('online', () => void this.flushPending());

    await this.reload();
  }

  private async reload(): Promise<void> {
    const tiles = await this.api.listTiles();
    this.queue = new ReviewQueue(tiles);
    await this.render();
    await this.refreshProgress();
  }

  private onKey(ev: KeyboardEvent): void {
    if (ev.key in KEY_BINDINGS) {
      void this.decide(KEY_BINDINGS[ev.key]);
    } else if (ev.key === 'ArrowRight') {
      this.queue.advance();
      void this.render();
    } else if (ev.key === 'ArrowLeft') {
      this.queue.back();
      void this.render();
    } else if (ev.key === 's') {
      this.showPoints = !this.showPoints;
      void this.render();
    }
  }

  private async decide(decision: DecisionKind): Promise<void> {
    const tile = this.queue.current();
    if (!tile) return;
    if (!this.queue.allowedDecisions(tile).includes(decision)) {
      this.banner(`'${decision}' is not valid for this tile`, 'warn');
      return;
    }
    // optimistic advance; the service response (or retry queue) reconciles
    this.queue.advance();
    await this.render();
    const action = this.pending.newAction(tile.tile_id, decision);
    const ok = await this.pending.offer(action);
    if (!ok) {
      this.banner(
        `decision for ${tile.tile_id} queued (${this.pending.size} pending); will retry`,
        'warn',
      );
    } else {
      this.banner('', 'ok');
    }
    await this.refreshProgress();
  }

  private async flushPending(): Promise<void> {
    const sent = await this.pending.flush();
    if (sent > 0) {
      this.banner(`replayed ${sent} queued decision(s)`, 'ok');
      await this.refreshProgress();
    }
  }

  private async refreshProgress(): Promise<void> {
    try {
      const progress: Progress = await this.api.getProgress();
      const c = progress.counts;
      el<HTMLElement>('progress').textContent =
        `curated ${c.curated} · excluded ${c.excluded} · zero ${c.zero} · ` +
        `surveyed left ${c.surveyed} · proposals ${progress.zero_proposals_pending}`;
    } catch {
      // progress is advisory; the queue keeps working offline
    }
  }

  private banner(message: string, kind: 'ok' | 'warn'): void {
    const node = el<HTMLElement>('banner');
    node.textContent = message;
    node.className = message ? `banner ${kind}` : 'banner hidden';
  }

  private async render(): Promise<void> {
    const tile = this.queue.current();
    el<HTMLElement>('remaining').textContent = String(this.queue.length);
    if (!tile) {
      el<HTMLElement>('viewer').classList.add('hidden');
      el<HTMLElement>('complete').classList.remove('hidden');
      return;
    }
    el<HTMLElement>('viewer').classList.remove('hidden');
    el<HTMLElement>('complete').classList.add('hidden');
    el<HTMLElement>('tile-id').textContent = tile.tile_id;
    el<HTMLElement>('tile-status').textContent = tile.zero_proposed
      ? `${tile.status} (zero proposal)`
      : tile.status;
    el<HTMLElement>('tile-pop').textContent =
      tile.population === null ? '—' : String(Math.round(tile.population));

    const zeroOnly = this.queue.allowedDecisions(tile).includes('zero');
    el<HTMLButtonElement>('btn-curate').disabled = zeroOnly;
    el<HTMLButtonElement>('btn-exclude').disabled = zeroOnly;
    el<HTMLButtonElement>('btn-zero').disabled = !zeroOnly;

    const img = el<HTMLImageElement>('chip');
    img.src = this.api.imageUrl(tile.tile_id);
    const ref = el<HTMLImageElement>('reference');
    ref.src = this.api.imageUrl(tile.tile_id, 'reference');
    ref.onerror = () => {
      ref.removeAttribute('src');
    };

    try {
      const detail: TileDetail = await this.api.getTile(tile.tile_id);
      this.drawOverlay(detail);
    } catch (err) {
      if (err instanceof ApiError && err.status === 0) {
        this.banner('service unreachable; retrying in background', 'warn');
      }
    }
  }

  private drawOverlay(detail: TileDetail): void {
    const canvas = el<HTMLCanvasElement>('overlay');
    const ctx = canvas.getContext('2d');
    if (!ctx) return;
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    if (!this.showPoints) return;
    const scale = canvas.width / 200; // chip PNGs are 200x200
    ctx.strokeStyle = '#ff3b3b';
    ctx.fillStyle = 'rgba(255,59,59,0.85)';
    ctx.font = '12px sans-serif';
    for (const p of detail.survey_points) {
      ctx.beginPath();
      ctx.arc(p.x_px * scale, p.y_px * scale, 6, 0, Math.PI * 2);
      ctx.stroke();
      ctx.fillText(String(p.household_size), p.x_px * scale + 8, p.y_px * scale - 8);
    }
  }
}

export function mount(): void {
  const app = new App('');
  void app.start();
}

declare global {
  interface Window {
    curationApp?: App;
  }
}

if (typeof document !== 'undefined' && document.getElementById('viewer')) {
  mount();
}

export type { TilePayload };
