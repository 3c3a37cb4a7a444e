export type TileStatus = 'unlabelled' | 'surveyed' | 'curated' | 'excluded' | 'zero';

export type DecisionKind = 'curate' | 'exclude' | 'zero';

export interface TilePayload {
  tile_id: string;
  row: number;
  col: number;
  population: number | null;
  status: TileStatus;
  region_key: string;
  zero_proposed: boolean;
}

export interface SurveyPoint {
  x_px: number;
  y_px: number;
  household_size: number;
}

export interface TileDetail extends TilePayload {
  survey_points: SurveyPoint[];
}

export interface ProgressCounts {
  unlabelled: number;
  surveyed: number;
  curated: number;
  excluded: number;
  zero: number;
}

export interface Progress {
  counts: ProgressCounts;
  total: number;
  zero_proposals_pending: number;
}

export interface TileView {
  tileId: string;
  imageUrl: string;
  referenceUrl: string;
  surveyPoints: SurveyPoint[];
  status: TileStatus;
  population: number | null;
  zeroProposed: boolean;
}
