// View state and request sequencing. Each view keeps at most one in-flight
// request; responses arriving for a superseded request are discarded.

export interface ViewState {
  activeExam: string | null;
  activeSequence: string | null;
  queryText: string;
  retrievalK: number;
  sliceCursor: number | null; // null until a saliency payload arrives
  threshold: number; // [0, 1]
  overlayOn: boolean;
}

export function initialState(): ViewState {
  return {
    activeExam: null,
    activeSequence: null,
    queryText: "",
    retrievalK: 15,
    sliceCursor: null,
    threshold: 0.5,
    overlayOn: true,
  };
}

export function clampSlice(state: ViewState, nSlices: number): ViewState {
  if (state.sliceCursor === null) return state;
  const cursor = Math.min(Math.max(state.sliceCursor, 0), nSlices - 1);
  return { ...state, sliceCursor: cursor };
}

export function clampThreshold(value: number): number {
  return Math.min(Math.max(value, 0), 1);
}

/** Monotone ticket counter per view; only the newest ticket may commit. */
export class RequestGate {
  private tickets = new Map<string, number>();

  issue(view: string): number {
    const next = (this.tickets.get(view) ?? 0) + 1;
    this.tickets.set(view, next);
    return next;
  }

  isCurrent(view: string, ticket: number): boolean {
    return this.tickets.get(view) === ticket;
  }
}
