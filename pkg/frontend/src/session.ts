// UI session state machine, kept free of DOM concerns so the prompting
// logic is unit-testable. One segment request in flight at a time; extra
// clicks are dropped with a busy notice.

import type { CaseInfo, ForgeApi, SegmentResponse } from './api.js'
import type { Box } from './coords.js'
import { boxArea } from './coords.js'
import { rleDecode, rleForeground } from './rle.js'

export interface PromptEntry {
  z: number
  box: Box
  latencyMs: number
  cacheHit: boolean
  foreground: number
}

export interface SessionEvents {
  onSlice?: (z: number) => void
  onOverlay?: (mask: Uint8Array | null, shape: [number, number]) => void
  onStatus?: (text: string, kind: 'info' | 'warn' | 'error') => void
  onHistory?: (entries: PromptEntry[]) => void
}

export class UiSession {
  caseInfo: CaseInfo | null = null
  slice = 0
  overlay: Uint8Array | null = null
  lastLatencyMs = 0
  lastCacheHit = false
  history: PromptEntry[] = []
  busy = false

  constructor(readonly api: ForgeApi, readonly events: SessionEvents = {}) {}

  get sliceCount(): number {
    return this.caseInfo?.slices ?? 0
  }

  get canNavigate(): boolean {
    return this.sliceCount > 1
  }

  async selectCase(id: string): Promise<void> {
    this.caseInfo = await this.api.caseInfo(id)
    this.slice = 0
    this.clearOverlay()
    this.history = []
    this.events.onHistory?.(this.history)
    this.events.onSlice?.(this.slice)
  }

  /** Clamp slice index into [0, D); refetch the image; drop the overlay. */
  navigate(delta: number): number {
    if (!this.caseInfo || !this.canNavigate) return this.slice
    const next = Math.min(this.sliceCount - 1, Math.max(0, this.slice + delta))
    if (next !== this.slice) {
      this.slice = next
      this.clearOverlay()
      this.events.onSlice?.(next)
    }
    return this.slice
  }

  clearOverlay(): void {
    this.overlay = null
    if (this.caseInfo) {
      const [h, w] = this.sliceShape()
      this.events.onOverlay?.(null, [h, w])
    }
  }

  sliceShape(): [number, number] {
    const shape = this.caseInfo!.shape
    return shape.length === 3 ? [shape[1], shape[2]] : [shape[0], shape[1]]
  }

  /** Submit a drawn box; returns the response or null when rejected locally. */
  async submitBox(box: Box): Promise<SegmentResponse | null> {
    if (!this.caseInfo) return null
    if (boxArea(box) <= 0) {
      this.events.onStatus?.('zero-area box ignored: drag a rectangle', 'warn')
      return null
    }
    if (this.busy) {
      this.events.onStatus?.('busy: previous prompt still running', 'warn')
      return null
    }
    this.busy = true
    try {
      const resp = await this.api.segment(this.caseInfo.id, this.slice, [
        box.x0,
        box.y0,
        box.x1,
        box.y1,
      ])
      const mask = rleDecode(resp.rle)
      this.overlay = mask
      this.lastLatencyMs = resp.latency_ms
      this.lastCacheHit = resp.cache_hit
      const entry: PromptEntry = {
        z: this.slice,
        box,
        latencyMs: resp.latency_ms,
        cacheHit: resp.cache_hit,
        foreground: rleForeground(resp.rle),
      }
      this.history.push(entry)
      this.events.onHistory?.(this.history)
      this.events.onOverlay?.(mask, [resp.shape[0], resp.shape[1]])
      this.events.onStatus?.(
        `${resp.latency_ms.toFixed(0)} ms${resp.cache_hit ? ' (cache hit)' : ''}`,
        'info',
      )
      return resp
    } catch (err) {
      this.events.onStatus?.(`segmentation failed: ${String(err)}`, 'error')
      return null
    } finally {
      this.busy = false
    }
  }
}
