import type { DecisionKind, Progress, TileDetail, TilePayload } from './types.js';

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(message: string, readonly status: number) {
    super(message);
  }
}

/** Thin typed client over the curation service HTTP API. */
export class ApiClient {
  constructor(
    private readonly base: string = '',
    private readonly fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async json<T>(url: string, init?: RequestInit): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchImpl(this.base + url, init);
    } catch (err) {
      throw new ApiError(`service unreachable: ${String(err)}`, 0);
    }
    if (!response.ok) {
      const body = await response.text();
      throw new ApiError(body || response.statusText, response.status);
    }
    return (await response.json()) as T;
  }

  async listTiles(status?: string, pageSize = 500): Promise<TilePayload[]> {
    const tiles: TilePayload[] = [];
    let page = 1;
    for (;;) {
      const params = new URLSearchParams({ page: String(page), page_size: String(pageSize) });
      if (status) params.set('status', status);
      const body = await this.json<{ total: number; tiles: TilePayload[] }>(
        `/api/tiles?${params}`,
      );
      tiles.push(...body.tiles);
      if (tiles.length >= body.total || body.tiles.length === 0) return tiles;
      page += 1;
    }
  }

  getTile(tileId: string): Promise<TileDetail> {
    return this.json<TileDetail>(`/api/tiles/${encodeURIComponent(tileId)}`);
  }

  postDecision(tileId: string, decision: DecisionKind, annotator: string, note?: string) {
    return this.json<TilePayload>(`/api/tiles/${encodeURIComponent(tileId)}/decision`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({ decision, annotator, note: note ?? null }),
    });
  }

  getProgress(): Promise<Progress> {
    return this.json<Progress>('/api/progress');
  }

  imageUrl(tileId: string, layer?: 'reference'): string {
    const suffix = layer ? `?layer=${layer}` : '';
    return `${this.base}/api/tiles/${encodeURIComponent(tileId)}/image.png${suffix}`;
  }
}
