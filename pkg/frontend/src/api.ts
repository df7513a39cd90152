// Thin typed client over the forge HTTP/JSON API.

import type { RlePayload } from './rle.js'

export interface CaseInfo {
  id: string
  modality: string
  shape: number[]
  slices: number
  spacing: number[]
  rgb: boolean
  num_instances: number
}

export interface SegmentResponse {
  rle: RlePayload
  shape: number[]
  latency_ms: number
  cache_hit: boolean
}

export class ForgeApi {
  constructor(readonly base: string = '') {}

  private async getJson<T>(path: string): Promise<T> {
    const resp = await fetch(this.base + path)
    if (!resp.ok) throw new Error(`${path}: HTTP ${resp.status}`)
    return (await resp.json()) as T
  }

  health(): Promise<{ status: string; version: string }> {
    return this.getJson('/healthz')
  }

  listCases(): Promise<string[]> {
    return this.getJson('/cases')
  }

  caseInfo(id: string): Promise<CaseInfo> {
    return this.getJson(`/cases/${encodeURIComponent(id)}`)
  }

  sliceUrl(id: string, z: number): string {
    return `${this.base}/cases/${encodeURIComponent(id)}/slices/${z}`
  }

  referenceRle(id: string, z: number): Promise<{ rle: RlePayload; shape: number[] }> {
    return this.getJson(`/cases/${encodeURIComponent(id)}/reference/${z}`)
  }

  async segment(caseId: string, z: number, box: [number, number, number, number]): Promise<SegmentResponse> {
    const resp = await fetch(this.base + '/segment', {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ case_id: caseId, z, box }),
    })
    if (!resp.ok) {
      const detail = await resp.text()
      throw new Error(`segment: HTTP ${resp.status} ${detail}`)
    }
    return (await resp.json()) as SegmentResponse
  }
}
