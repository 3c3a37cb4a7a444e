import type { TilePayload } from './types.js';

/**
 * The review queue: surveyed tiles first (imagery vs survey check), then
 * pending zero proposals awaiting confirmation. Order within each group is
 * by tile_id so two annotators see the same sequence.
 */
export class ReviewQueue {
  private items: TilePayload[];
  private cursor = 0;

  constructor(tiles: TilePayload[]) {
    const surveyed = tiles
      .filter((t) => t.status === 'surveyed')
      .sort((a, b) => a.tile_id.localeCompare(b.tile_id));
    const proposals = tiles
      .filter((t) => t.status === 'unlabelled' && t.zero_proposed)
      .sort((a, b) => a.tile_id.localeCompare(b.tile_id));
    this.items = [...surveyed, ...proposals];
  }

  get length(): number {
    return this.items.length - this.cursor;
  }

  get done(): boolean {
    return this.cursor >= this.items.length;
  }

  current(): TilePayload | null {
    return this.done ? null : this.items[this.cursor];
  }

  /** Peek the whole remaining queue (for progress display). */
  remaining(): TilePayload[] {
    return this.items.slice(this.cursor);
  }

  advance(): TilePayload | null {
    if (!this.done) this.cursor += 1;
    return this.current();
  }

  back(): TilePayload | null {
    if (this.cursor > 0) this.cursor -= 1;
    return this.current();
  }

  /** Valid decisions for the tile under review. */
  allowedDecisions(tile: TilePayload): ReadonlyArray<'curate' | 'exclude' | 'zero'> {
    if (tile.status === 'surveyed') return ['curate', 'exclude'];
    if (tile.zero_proposed) return ['zero'];
    return [];
  }
}
