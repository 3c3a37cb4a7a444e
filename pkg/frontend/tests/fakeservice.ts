/**
 * In-memory stand-in for the curation service with the same behavioural
 * contract: append-only decision log, last-write-wins statuses, counts that
 * always sum to the tile total, and full state recovery by log replay.
 */
import type { DecisionKind, TilePayload } from '../src/types.js';

export interface LoggedDecision {
  tile_id: string;
  decision: DecisionKind;
  annotator: string;
  seq: number;
}

export class FakeService {
  tiles = new Map<string, TilePayload>();
  log: LoggedDecision[] = [];
  offline = false;
  private seq = 0;

  constructor(tiles: TilePayload[], replayLog: LoggedDecision[] = []) {
    for (const t of tiles) this.tiles.set(t.tile_id, { ...t });
    for (const d of replayLog) this.apply(d, false);
  }

  private apply(d: LoggedDecision, record = true): TilePayload {
    const tile = this.tiles.get(d.tile_id);
    if (!tile) throw Object.assign(new Error(`unknown tile ${d.tile_id}`), { status: 404 });
    if (d.decision === 'zero') {
      if (tile.status !== 'unlabelled' && tile.status !== 'zero') {
        throw Object.assign(new Error('zero invalid for surveyed tile'), { status: 400 });
      }
      tile.status = 'zero';
      tile.population = 0;
    } else if (d.decision === 'curate') {
      if (tile.population === null) {
        throw Object.assign(new Error('cannot curate unlabelled tile'), { status: 400 });
      }
      tile.status = 'curated';
    } else {
      tile.status = 'excluded';
    }
    if (record) this.log.push(d);
    return { ...tile };
  }

  decide(tileId: string, decision: DecisionKind, annotator: string): TilePayload {
    if (this.offline) throw Object.assign(new Error('offline'), { status: 0 });
    this.seq += 1;
    return this.apply({ tile_id: tileId, decision, annotator, seq: this.seq });
  }

  counts(): Record<string, number> {
    const counts: Record<string, number> = {
      unlabelled: 0, surveyed: 0, curated: 0, excluded: 0, zero: 0,
    };
    for (const t of this.tiles.values()) counts[t.status] += 1;
    return counts;
  }

  restart(): FakeService {
    const fresh = [...this.tiles.values()].map((t) => ({ ...t }));
    // rebuild the manifest state, then replay the log from scratch
    for (const t of fresh) {
      const replayed = this.originalStatus(t.tile_id);
      t.status = replayed.status;
      t.population = replayed.population;
    }
    return new FakeService(fresh, this.log);
  }

  private originalStatus(tileId: string): { status: TilePayload['status']; population: number | null } {
    // statuses before any decision: surveyed tiles keep labels, proposals are unlabelled
    const t = this.tiles.get(tileId)!;
    if (t.zero_proposed) return { status: 'unlabelled', population: null };
    return { status: 'surveyed', population: t.population ?? 1 };
  }

  /** fetch-compatible adapter so ApiClient can talk to the fake directly. */
  fetch = async (url: string, init?: RequestInit): Promise<Response> => {
    if (this.offline) throw new TypeError('network down');
    const respond = (body: unknown, status = 200) =>
      new Response(JSON.stringify(body), { status });
    const decisionMatch = url.match(/\/api\/tiles\/([^/]+)\/decision$/);
    if (decisionMatch && init?.method === 'POST') {
      const body = JSON.parse(String(init.body)) as { decision: DecisionKind; annotator: string };
      try {
        return respond(this.decide(decodeURIComponent(decisionMatch[1]), body.decision, body.annotator));
      } catch (err) {
        const status = (err as { status?: number }).status ?? 500;
        if (status === 0) throw new TypeError('network down');
        return respond({ detail: String(err) }, status);
      }
    }
    const detailMatch = url.match(/\/api\/tiles\/([^/?]+)$/);
    if (detailMatch) {
      const tile = this.tiles.get(decodeURIComponent(detailMatch[1]));
      if (!tile) return respond({ detail: 'unknown tile' }, 404);
      return respond({ ...tile, survey_points: [] });
    }
    if (url.includes('/api/tiles')) {
      const params = new URL(url, 'http://x').searchParams;
      const status = params.get('status');
      const page = Number(params.get('page') ?? '1');
      const pageSize = Number(params.get('page_size') ?? '50');
      let all = [...this.tiles.values()].sort((a, b) => a.tile_id.localeCompare(b.tile_id));
      if (status) all = all.filter((t) => t.status === status);
      const start = (page - 1) * pageSize;
      return respond({
        total: all.length,
        page,
        page_size: pageSize,
        tiles: all.slice(start, start + pageSize),
      });
    }
    if (url.includes('/api/progress')) {
      const counts = this.counts();
      const pending = [...this.tiles.values()].filter(
        (t) => t.zero_proposed && t.status === 'unlabelled',
      ).length;
      return respond({
        counts,
        total: Object.values(counts).reduce((a, b) => a + b, 0),
        zero_proposals_pending: pending,
      });
    }
    return respond({ detail: 'not found' }, 404);
  };
}

export function surveyedTile(i: number, population = 5): TilePayload {
  return {
    tile_id: `D:0:${i}`,
    row: 0,
    col: i,
    population,
    status: 'surveyed',
    region_key: 'D',
    zero_proposed: false,
  };
}

export function zeroProposal(i: number): TilePayload {
  return {
    tile_id: `D:9:${i}`,
    row: 9,
    col: i,
    population: null,
    status: 'unlabelled',
    region_key: 'D',
    zero_proposed: true,
  };
}
