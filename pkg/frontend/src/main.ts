// DOM wiring: case selector, slice scrubbing, box drawing, mask overlay.

import { ForgeApi } from './api.js'
import { fitScale, normalizeBox, type Box, type ViewTransform } from './coords.js'
import { maskToRgba, PREDICTION_COLOR, REFERENCE_COLOR } from './overlay.js'
import { rleDecode } from './rle.js'
import { UiSession } from './session.js'

const MAX_VIEW = 640

const api = new ForgeApi('')
const caseSelect = document.getElementById('case-select') as HTMLSelectElement
const sliceLabel = document.getElementById('slice-label') as HTMLSpanElement
const prevBtn = document.getElementById('prev-slice') as HTMLButtonElement
const nextBtn = document.getElementById('next-slice') as HTMLButtonElement
const showRef = document.getElementById('show-reference') as HTMLInputElement
const statusEl = document.getElementById('status') as HTMLDivElement
const historyEl = document.getElementById('history') as HTMLUListElement
const baseCanvas = document.getElementById('slice-canvas') as HTMLCanvasElement
const overlayCanvas = document.getElementById('overlay-canvas') as HTMLCanvasElement
const drawCanvas = document.getElementById('draw-canvas') as HTMLCanvasElement

let view: ViewTransform | null = null
let sliceImage: HTMLImageElement | null = null

function setStatus(text: string, kind: 'info' | 'warn' | 'error') {
  statusEl.textContent = text
  statusEl.className = `status ${kind}`
}

const session = new UiSession(api, {
  onSlice: (z) => {
    sliceLabel.textContent = session.canNavigate ? `slice ${z + 1}/${session.sliceCount}` : '2D'
    void loadSlice()
  },
  onOverlay: (mask, shape) => renderOverlay(mask, shape),
  onStatus: setStatus,
  onHistory: (entries) => {
    historyEl.replaceChildren(
      ...entries
        .slice(-12)
        .reverse()
        .map((e) => {
          const li = document.createElement('li')
          li.textContent =
            `z${e.z} [${e.box.x0},${e.box.y0},${e.box.x1},${e.box.y1}] ` +
            `${e.foreground}px ${e.latencyMs.toFixed(0)}ms${e.cacheHit ? ' hit' : ''}`
          return li
        }),
    )
  },
})

async function loadSlice(): Promise<void> {
  if (!session.caseInfo) return
  const [h, w] = session.sliceShape()
  view = fitScale(w, h, MAX_VIEW, MAX_VIEW)
  const cw = Math.round(w * view.scale)
  const ch = Math.round(h * view.scale)
  for (const canvas of [baseCanvas, overlayCanvas, drawCanvas]) {
    canvas.width = cw
    canvas.height = ch
  }
  const img = new Image()
  img.src = api.sliceUrl(session.caseInfo.id, session.slice)
  await img.decode()
  sliceImage = img
  redrawBase()
  renderOverlay(session.overlay, [h, w])
  await drawReference()
}

function redrawBase(): void {
  const ctx = baseCanvas.getContext('2d')!
  ctx.clearRect(0, 0, baseCanvas.width, baseCanvas.height)
  if (sliceImage) {
    ctx.imageSmoothingEnabled = false
    ctx.drawImage(sliceImage, 0, 0, baseCanvas.width, baseCanvas.height)
  }
}

async function drawReference(): Promise<void> {
  if (!showRef.checked || !session.caseInfo) return
  try {
    const payload = await api.referenceRle(session.caseInfo.id, session.slice)
    const mask = rleDecode(payload.rle)
    paintMask(mask, payload.shape as [number, number], REFERENCE_COLOR, false)
  } catch {
    // reference overlay is optional; ignore fetch errors
  }
}

function paintMask(
  mask: Uint8Array,
  shape: [number, number],
  color: typeof PREDICTION_COLOR,
  clear: boolean,
): void {
  const [h, w] = shape
  const ctx = overlayCanvas.getContext('2d')!
  if (clear) ctx.clearRect(0, 0, overlayCanvas.width, overlayCanvas.height)
  const buf = maskToRgba(mask, w, h, color)
  const tmp = document.createElement('canvas')
  tmp.width = w
  tmp.height = h
  tmp.getContext('2d')!.putImageData(new ImageData(buf, w, h), 0, 0)
  ctx.imageSmoothingEnabled = false
  ctx.drawImage(tmp, 0, 0, overlayCanvas.width, overlayCanvas.height)
}

function renderOverlay(mask: Uint8Array | null, shape: [number, number]): void {
  const ctx = overlayCanvas.getContext('2d')!
  ctx.clearRect(0, 0, overlayCanvas.width, overlayCanvas.height)
  if (mask) paintMask(mask, shape, PREDICTION_COLOR, false)
  void drawReference()
}

// box drawing
let dragStart: [number, number] | null = null

drawCanvas.addEventListener('mousedown', (ev) => {
  dragStart = [ev.offsetX, ev.offsetY]
})

drawCanvas.addEventListener('mousemove', (ev) => {
  if (!dragStart) return
  const ctx = drawCanvas.getContext('2d')!
  ctx.clearRect(0, 0, drawCanvas.width, drawCanvas.height)
  ctx.strokeStyle = '#4285f4'
  ctx.lineWidth = 2
  ctx.strokeRect(
    Math.min(dragStart[0], ev.offsetX),
    Math.min(dragStart[1], ev.offsetY),
    Math.abs(ev.offsetX - dragStart[0]),
    Math.abs(ev.offsetY - dragStart[1]),
  )
})

drawCanvas.addEventListener('mouseup', (ev) => {
  if (!dragStart || !view) return
  const box: Box = normalizeBox(view, dragStart[0], dragStart[1], ev.offsetX, ev.offsetY)
  dragStart = null
  drawCanvas.getContext('2d')!.clearRect(0, 0, drawCanvas.width, drawCanvas.height)
  void session.submitBox(box)
})

prevBtn.addEventListener('click', () => session.navigate(-1))
nextBtn.addEventListener('click', () => session.navigate(+1))
showRef.addEventListener('change', () => renderOverlay(session.overlay, session.sliceShape()))
caseSelect.addEventListener('change', () => void session.selectCase(caseSelect.value))
document.addEventListener('keydown', (ev) => {
  if (ev.key === 'ArrowUp') session.navigate(+1)
  if (ev.key === 'ArrowDown') session.navigate(-1)
})

async function boot(): Promise<void> {
  try {
    await api.health()
    const ids = await api.listCases()
    caseSelect.replaceChildren(
      ...ids.map((id) => {
        const opt = document.createElement('option')
        opt.value = id
        opt.textContent = id
        return opt
      }),
    )
    if (ids.length === 0) {
      setStatus('no cases registered; viewer disabled', 'warn')
      caseSelect.disabled = true
      return
    }
    await session.selectCase(ids[0])
    setStatus('draw a box on the image to segment', 'info')
  } catch (err) {
    setStatus(`service unreachable: ${String(err)}`, 'error')
    caseSelect.disabled = true
  }
}

void boot()
