"""HTTP service endpoints, RLE round trips, and CLI/service equivalence."""

import io

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from segforge.bundle import save_case
from segforge.errors import ValidationError
from segforge.infer import EmbeddingCache, segment_2d, segment_3d
from segforge.model import NetConfig, PromptNet, save_weights
from segforge.rle import rle_decode, rle_encode, rle_foreground
from segforge.service import create_app
from segforge.train import make_toy_dataset, make_toy_volume

SMALL = NetConfig(embed_dim=16, encoder_blocks=1, decoder_blocks=1, query_tokens=2, heads=2)


class TestRLE:
    def test_round_trip_random(self, rng):
        for _ in range(10):
            mask = rng.random((17, 23)) < rng.uniform(0, 1)
            payload = rle_encode(mask)
            np.testing.assert_array_equal(rle_decode(payload), mask)
            assert rle_foreground(payload) == int(mask.sum())

    def test_empty_and_full(self):
        empty = np.zeros((4, 5), dtype=bool)
        full = np.ones((4, 5), dtype=bool)
        assert rle_encode(empty)["counts"] == [20]
        assert rle_encode(full)["counts"] == [0, 20]
        np.testing.assert_array_equal(rle_decode(rle_encode(empty)), empty)
        np.testing.assert_array_equal(rle_decode(rle_encode(full)), full)

    def test_bad_counts_rejected(self):
        with pytest.raises(ValidationError):
            rle_decode({"counts": [3], "shape": [2, 2]})


@pytest.fixture(scope="module")
def service_env(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc")
    net = PromptNet(SMALL, seed=13)
    save_weights(net, root / "weights")
    data = make_toy_dataset(2, seed=31, size=64)
    cases = data.as_cases(prefix="toy")
    for case in cases:
        save_case(case, root / "cases" / case.id)
    vol = make_toy_volume(4, seed=5, size=64)
    save_case(vol, root / "cases" / vol.id)
    app = create_app(root / "weights", root / "cases", cache_capacity=16)
    return {"net": net, "cases": cases, "volume": vol, "client": TestClient(app)}


class TestEndpoints:
    def test_healthz(self, service_env):
        r = service_env["client"].get("/healthz")
        assert r.status_code == 200
        body = r.json()
        assert body["status"] == "ok"
        assert "version" in body

    def test_case_listing(self, service_env):
        r = service_env["client"].get("/cases")
        assert r.status_code == 200
        ids = r.json()
        assert ids == sorted(c.id for c in service_env["cases"]) + [service_env["volume"].id]

    def test_case_info(self, service_env):
        case = service_env["volume"]
        r = service_env["client"].get(f"/cases/{case.id}")
        assert r.status_code == 200
        info = r.json()
        assert info["slices"] == 4
        assert info["shape"] == list(case.spatial_shape)
        assert info["spacing"] == list(case.spacing)

    def test_unknown_case_404(self, service_env):
        assert service_env["client"].get("/cases/nope").status_code == 404
        r = service_env["client"].post(
            "/segment", json={"case_id": "nope", "z": 0, "box": [0, 0, 4, 4]}
        )
        assert r.status_code == 404

    def test_slice_png_round_trip(self, service_env):
        case = service_env["cases"][0]
        r = service_env["client"].get(f"/cases/{case.id}/slices/0")
        assert r.status_code == 200
        assert r.headers["content-type"] == "image/png"
        decoded = np.asarray(Image.open(io.BytesIO(r.content)))
        np.testing.assert_array_equal(decoded, case.image)

    def test_slice_png_deterministic(self, service_env):
        case = service_env["cases"][0]
        a = service_env["client"].get(f"/cases/{case.id}/slices/0").content
        b = service_env["client"].get(f"/cases/{case.id}/slices/0").content
        assert a == b

    def test_slice_out_of_range_404(self, service_env):
        case = service_env["cases"][0]
        assert service_env["client"].get(f"/cases/{case.id}/slices/1").status_code == 404
        vol = service_env["volume"]
        assert service_env["client"].get(f"/cases/{vol.id}/slices/99").status_code == 404

    def test_malformed_box_400(self, service_env):
        case = service_env["cases"][0]
        for box in ([5, 5, 5, 20], [0, 0, 500, 20], [0, 0, 4]):
            r = service_env["client"].post(
                "/segment", json={"case_id": case.id, "z": 0, "box": box}
            )
            assert r.status_code == 400, box

    def test_segment_and_cache_hit(self, service_env):
        case = service_env["cases"][1]
        box = list(case.prompts[0].box)
        first = service_env["client"].post(
            "/segment", json={"case_id": case.id, "z": 0, "box": box}
        )
        assert first.status_code == 200
        body = first.json()
        assert body["shape"] == list(case.spatial_shape)
        assert body["latency_ms"] > 0
        second = service_env["client"].post(
            "/segment", json={"case_id": case.id, "z": 0, "box": box}
        )
        assert second.json()["cache_hit"] is True
        assert second.json()["rle"] == body["rle"]

    def test_rle_round_trip_through_wire(self, service_env):
        case = service_env["cases"][0]
        box = list(case.prompts[0].box)
        body = service_env["client"].post(
            "/segment", json={"case_id": case.id, "z": 0, "box": box}
        ).json()
        mask = rle_decode(body["rle"])
        assert mask.shape == tuple(body["shape"])
        assert int(mask.sum()) == rle_foreground(body["rle"])

    def test_service_matches_offline_2d(self, service_env):
        case = service_env["cases"][0]
        box = case.prompts[0]
        offline = segment_2d(service_env["net"], case, EmbeddingCache())
        body = service_env["client"].post(
            "/segment", json={"case_id": case.id, "z": 0, "box": list(box.box)}
        ).json()
        np.testing.assert_array_equal(rle_decode(body["rle"]), offline.masks[box.target_label])

    def test_service_matches_offline_3d_slice(self, service_env):
        vol = service_env["volume"]
        prompt = vol.prompts[0]
        z = 2
        offline = segment_3d(service_env["net"], vol, prompt, EmbeddingCache())
        body = service_env["client"].post(
            "/segment", json={"case_id": vol.id, "z": z, "box": list(prompt.box_2d())}
        ).json()
        np.testing.assert_array_equal(rle_decode(body["rle"]), offline.masks[prompt.target_label][z])

    def test_reference_overlay_endpoint(self, service_env):
        case = service_env["cases"][0]
        r = service_env["client"].get(f"/cases/{case.id}/reference/0")
        assert r.status_code == 200
        ref = rle_decode(r.json()["rle"])
        np.testing.assert_array_equal(ref, case.reference > 0)

    def test_stats_counters_consistent(self, service_env):
        stats = service_env["client"].get("/stats").json()
        # every served segment request makes exactly one embedding lookup
        assert stats["cache_hits"] + stats["cache_misses"] == stats["requests"] > 0
        assert stats["encoder_invocations"] == stats["cache_misses"]
        assert stats["latency_ms"]["count"] == stats["requests"]
        before = stats["requests"]
        case = service_env["cases"][0]
        service_env["client"].post(
            "/segment", json={"case_id": case.id, "z": 0, "box": [1, 1, 30, 30]}
        )
        after = service_env["client"].get("/stats").json()
        assert after["requests"] == before + 1
