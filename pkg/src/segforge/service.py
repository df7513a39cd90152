"""HTTP service for interactive box-prompt segmentation.

One model per process, shared read-only; the embedding cache follows the
inference-pipeline contract, so repeat prompts on a slice reuse its
encoding. The segmentation path is the same code the CLI uses, so
service masks match offline masks bitwise.
"""

from __future__ import annotations

import io
import logging
import statistics
import threading
import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import Response
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel

from . import __version__
from .bundle import CaseBundle, load_case
from .errors import SegforgeError, ValidationError
from .infer import DEFAULT_CACHE_CAPACITY, EmbeddingCache, prepare_display, segment_slice
from .model import PromptNet, load_weights
from .rle import rle_encode

logger = logging.getLogger(__name__)


class SegmentRequest(BaseModel):
    case_id: str
    z: int = 0
    box: list[int]


class ServiceState:
    """Loaded model, case registry, cache, and monotone counters."""

    def __init__(self, net: PromptNet, cases: list[CaseBundle], cache_capacity: int):
        self.net = net
        self.cases = {c.id: c for c in cases}
        self.displays = {c.id: prepare_display(c) for c in cases}
        self.cache = EmbeddingCache(capacity=cache_capacity)
        self.requests = 0
        self.latencies_ms: list[float] = []
        self.lock = threading.Lock()

    def slice_count(self, case: CaseBundle) -> int:
        return case.spatial_shape[0] if case.is_3d else 1


def load_cases(case_dir: str | Path) -> list[CaseBundle]:
    root = Path(case_dir)
    cases = []
    for manifest in sorted(root.glob("*/manifest.json")):
        cases.append(load_case(manifest.parent))
    return cases


def create_app(
    weights_path: str | Path,
    case_dir: str | Path,
    cache_capacity: int = DEFAULT_CACHE_CAPACITY,
    ui_dir: str | Path | None = None,
) -> FastAPI:
    net = load_weights(weights_path)
    cases = load_cases(case_dir)
    state = ServiceState(net, cases, cache_capacity)
    app = FastAPI(title="segforge", version=__version__)
    app.state.service = state
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "version": __version__}

    @app.get("/cases")
    def list_case_ids():
        return sorted(state.cases)

    @app.get("/cases/{case_id}")
    def case_info(case_id: str):
        case = state.cases.get(case_id)
        if case is None:
            raise HTTPException(status_code=404, detail=f"unknown case {case_id!r}")
        return {
            "id": case.id,
            "modality": case.modality,
            "shape": list(case.spatial_shape),
            "slices": state.slice_count(case),
            "spacing": list(case.spacing),
            "rgb": case.image.ndim == 3 and not case.is_3d,
            "num_instances": case.num_instances,
        }

    @app.get("/cases/{case_id}/slices/{z}")
    def slice_png(case_id: str, z: int):
        case = state.cases.get(case_id)
        if case is None:
            raise HTTPException(status_code=404, detail=f"unknown case {case_id!r}")
        if z < 0 or z >= state.slice_count(case):
            raise HTTPException(status_code=404, detail=f"slice {z} out of range")
        display = state.displays[case_id]
        slice_u8 = display[z] if case.is_3d else display
        image = Image.fromarray(slice_u8)  # grayscale L or RGB
        buf = io.BytesIO()
        image.save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/cases/{case_id}/reference/{z}")
    def reference_rle(case_id: str, z: int):
        case = state.cases.get(case_id)
        if case is None:
            raise HTTPException(status_code=404, detail=f"unknown case {case_id!r}")
        if z < 0 or z >= state.slice_count(case):
            raise HTTPException(status_code=404, detail=f"slice {z} out of range")
        ref = case.reference[z] if case.is_3d else case.reference
        return {"rle": rle_encode(ref > 0), "shape": list(ref.shape)}

    @app.post("/segment")
    def segment(req: SegmentRequest):
        case = state.cases.get(req.case_id)
        if case is None:
            raise HTTPException(status_code=404, detail=f"unknown case {req.case_id!r}")
        if req.z < 0 or req.z >= state.slice_count(case):
            raise HTTPException(status_code=404, detail=f"slice {req.z} out of range")
        if len(req.box) != 4:
            raise HTTPException(status_code=400, detail="box must be [x0, y0, x1, y1]")
        x0, y0, x1, y1 = req.box
        h, w = case.spatial_shape[-2:]
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise HTTPException(status_code=400, detail=f"malformed box {req.box}")
        display = state.displays[req.case_id]
        z = req.z if case.is_3d else None
        start = time.perf_counter()
        try:
            mask, hit = segment_slice(
                state.net, display, req.case_id, z, (x0, y0, x1, y1), state.cache
            )
        except SegforgeError as e:
            raise HTTPException(status_code=400, detail=str(e)) from e
        latency_ms = (time.perf_counter() - start) * 1000.0
        with state.lock:
            state.requests += 1
            state.latencies_ms.append(latency_ms)
        return {
            "rle": rle_encode(mask),
            "shape": list(mask.shape),
            "latency_ms": latency_ms,
            "cache_hit": hit,
        }

    @app.get("/stats")
    def stats():
        with state.lock:
            lat = list(state.latencies_ms)
            requests = state.requests
        return {
            "requests": requests,
            "cache_hits": state.cache.hits,
            "cache_misses": state.cache.misses,
            "encoder_invocations": state.cache.encoder_invocations,
            "latency_ms": {
                "count": len(lat),
                "mean": statistics.fmean(lat) if lat else 0.0,
                "last": lat[-1] if lat else 0.0,
            },
        }

    if ui_dir is not None:
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


def serve(
    weights_path: str | Path,
    case_dir: str | Path,
    host: str = "127.0.0.1",
    port: int = 8765,
    cache_capacity: int = DEFAULT_CACHE_CAPACITY,
    ui_dir: str | Path | None = None,
) -> None:
    """Run the service until SIGINT/SIGTERM (uvicorn handles shutdown)."""
    import uvicorn

    app = create_app(weights_path, case_dir, cache_capacity, ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="info")
