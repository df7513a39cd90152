// Live-loop acceptance: spawns the real forge service and drives the same
// client code the page uses. Run via `npm run test:integration` (requires
// the segforge Python package on PATH).

import { afterAll, beforeAll, describe, expect, it } from 'vitest'
import { execFileSync, spawn, type ChildProcess } from 'node:child_process'
import { mkdtempSync, rmSync } from 'node:fs'
import { tmpdir } from 'node:os'
import { join } from 'node:path'

import { ForgeApi } from '../src/api.js'
import { countPainted, maskToRgba, PREDICTION_COLOR } from '../src/overlay.js'
import { rleDecode, rleForeground } from '../src/rle.js'

const RUN = !!process.env.RUN_INTEGRATION
const PORT = 8799
const BASE = `http://127.0.0.1:${PORT}`

let server: ChildProcess | null = null
let workdir = ''

async function waitForHealth(api: ForgeApi, timeoutMs: number): Promise<void> {
  const deadline = Date.now() + timeoutMs
  for (;;) {
    try {
      await api.health()
      return
    } catch {
      if (Date.now() > deadline) throw new Error('service did not come up')
      await new Promise((r) => setTimeout(r, 250))
    }
  }
}

describe.skipIf(!RUN)('live service loop', () => {
  const api = new ForgeApi(BASE)

  beforeAll(async () => {
    workdir = mkdtempSync(join(tmpdir(), 'forge-ui-'))
    execFileSync('python3', [
      '-m', 'segforge.cli', 'make-toy',
      '--out', join(workdir, 'cases'), '--n', '2', '--seed', '3',
      '--size', '128', '--depth', '6',
    ])
    execFileSync('python3', [
      '-c',
      [
        'from segforge.model import NetConfig, PromptNet, save_weights',
        `save_weights(PromptNet(NetConfig(), seed=11), r'${join(workdir, 'weights')}')`,
      ].join('; '),
    ])
    server = spawn('python3', [
      '-m', 'segforge.cli', 'serve',
      '--weights', join(workdir, 'weights'),
      '--cases', join(workdir, 'cases'),
      '--port', String(PORT),
    ], { stdio: 'ignore' })
    await waitForHealth(api, 60_000)
  }, 120_000)

  afterAll(() => {
    server?.kill('SIGTERM')
    if (workdir) rmSync(workdir, { recursive: true, force: true })
  })

  it('lists the registered cases', async () => {
    const ids = await api.listCases()
    expect(ids.length).toBe(3) // 2 flat cases + 1 volume
  })

  it('ten prompts render within budget with counts matching the wire', async () => {
    const ids = await api.listCases()
    const volume = ids.find((id) => id.startsWith('toyvol'))!
    const info = await api.caseInfo(volume)
    const [h, w] = [info.shape[1], info.shape[2]]
    for (let i = 0; i < 10; i++) {
      const z = i % info.slices
      const pad = 10 + i
      const started = Date.now()
      const resp = await api.segment(volume, z, [pad, pad, w - pad, h - pad])
      const mask = rleDecode(resp.rle)
      const buf = maskToRgba(mask, w, h, PREDICTION_COLOR)
      const elapsed = Date.now() - started
      expect(elapsed).toBeLessThan(1500)
      expect(countPainted(buf)).toBe(rleForeground(resp.rle))
    }
  }, 60_000)

  it('repeat prompt on the same slice reports a cache hit', async () => {
    const ids = await api.listCases()
    const flat = ids.find((id) => !id.startsWith('toyvol'))!
    const first = await api.segment(flat, 0, [4, 4, 60, 60])
    const second = await api.segment(flat, 0, [8, 8, 50, 50])
    expect(second.cache_hit).toBe(true)
    expect(first.shape).toEqual(second.shape)
  }, 30_000)

  it('returns clean errors for bad prompts', async () => {
    const ids = await api.listCases()
    await expect(api.segment(ids[0], 0, [10, 10, 5, 20])).rejects.toThrow(/400/)
    await expect(api.segment('ghost', 0, [0, 0, 5, 5])).rejects.toThrow(/404/)
  })
})
