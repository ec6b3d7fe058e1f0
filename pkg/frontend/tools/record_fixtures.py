"""Record golden fixtures for the frontend tests from the real service.

Boots the editing service on a freshly generated dataset and an untrained
checkpoint (both fully seeded, so reruns reproduce the same bytes), drives
it over HTTP, and saves the raw JSON responses the browser client would
see. The vitest suite replays these to prove the client-side stroke
rasterizer, overlay renderer, and editor state machine agree with the
server without needing a Python process at test time.

Run from the repository root:

    python frontend/tools/record_fixtures.py
"""

import json
import pathlib
import sys
import tempfile
import time

from fastapi.testclient import TestClient

from abnedit.data import generate, save_dataset
from abnedit.model import ModelConfig, build_model, save_checkpoint
from abnedit.service import create_app

OUT = pathlib.Path(__file__).resolve().parent.parent / "fixtures" / "service_fixtures.json"

# Ten scripted stroke sequences covering the rasterizer's branches:
# single dots, polylines, duplicate consecutive points, both brush modes,
# multi-stroke submissions, saturating strength, radius extremes, and
# fractional coordinates. Display space is 64x64.
SEQUENCES = [
    {"name": "single_dot", "sample_id": "train_0000", "strokes": [
        {"mode": "add", "points": [[32, 32]], "radius": 6, "strength": 0.8}]},
    {"name": "short_segment", "sample_id": "train_0001", "strokes": [
        {"mode": "add", "points": [[10.5, 20.25], [40.75, 22.5]],
         "radius": 4, "strength": 0.6}]},
    {"name": "polyline_with_duplicate_point", "sample_id": "train_0002", "strokes": [
        {"mode": "add", "points": [[8, 8], [16, 12], [16, 12], [24, 8], [32, 14], [40, 10]],
         "radius": 3, "strength": 0.5}]},
    {"name": "remove_band", "sample_id": "train_0003", "strokes": [
        {"mode": "remove", "points": [[12, 40], [50, 44]], "radius": 8, "strength": 0.9}]},
    {"name": "two_overlapping_adds", "sample_id": "train_0004", "strokes": [
        {"mode": "add", "points": [[20, 20], [28, 28]], "radius": 5, "strength": 0.7},
        {"mode": "add", "points": [[24, 24], [30, 18]], "radius": 5, "strength": 0.7}]},
    {"name": "full_coverage_saturating", "sample_id": "train_0005", "strokes": [
        {"mode": "add", "points": [[31.5, 31.5]], "radius": 48, "strength": 1.0}]},
    {"name": "tiny_radius_origin_corner", "sample_id": "train_0006", "strokes": [
        {"mode": "add", "points": [[0, 0]], "radius": 1, "strength": 0.3}]},
    {"name": "far_corner", "sample_id": "train_0007", "strokes": [
        {"mode": "add", "points": [[63, 63], [60, 58]], "radius": 2.5, "strength": 0.45}]},
    {"name": "add_then_remove_cross", "sample_id": "train_0008", "strokes": [
        {"mode": "add", "points": [[16, 48], [48, 48]], "radius": 6, "strength": 0.8},
        {"mode": "remove", "points": [[32, 40], [32, 56]], "radius": 5, "strength": 0.65}]},
    {"name": "zigzag_fractional", "sample_id": "train_0009", "strokes": [
        {"mode": "add",
         "points": [[5.25, 5.75], [12.5, 18.125], [20.0625, 7.375],
                    [33.33, 25.1], [47.9, 12.2]],
         "radius": 3.5, "strength": 0.55}]},
]


def must(resp, code=200):
    if resp.status_code != code:
        raise SystemExit(f"{resp.request.method} {resp.url} -> "
                         f"{resp.status_code}: {resp.text[:300]}")
    return resp.json()


def main():
    tmp = pathlib.Path(tempfile.mkdtemp(prefix="abnedit_fixtures_"))
    samples = generate(12, seed=0)
    save_dataset(samples, str(tmp / "data"), "train", 0)
    model = build_model(ModelConfig(), seed=0)
    save_checkpoint(model, tmp / "model.abnm")

    app = create_app(str(tmp / "model.abnm"), str(tmp / "data" / "train.tsv"),
                     str(tmp / "store"))
    client = TestClient(app)

    fixtures = {"display_size": [64, 64]}
    fixtures["health"] = must(client.get("/health"))
    fixtures["samples"] = must(client.get("/samples"))
    fixtures["sample_view"] = must(client.get("/samples/train_0000"))

    # resubmitting a sample's own display map: the state tests replay this
    fixtures["unchanged_submit"] = must(client.post(
        "/samples/train_0000/edits",
        json={"map_b64": fixtures["sample_view"]["map_b64"]}))

    recorded = []
    for seq in SEQUENCES:
        session = must(client.post(f"/samples/{seq['sample_id']}/edits",
                                   json={"strokes": seq["strokes"]}))
        recorded.append({"name": seq["name"], "sample_id": seq["sample_id"],
                         "strokes": seq["strokes"], "response": session})
        print(f"recorded {seq['name']}: session {session['session_id']}")
    fixtures["stroke_sequences"] = recorded

    first = recorded[0]["response"]["session_id"]
    fixtures["commit"] = must(client.post(f"/sessions/{first}/commit"))

    job = must(client.post("/jobs/finetune",
                           json={"epochs": 1, "batch_size": 4,
                                 "gamma": 0.1, "seed": 0}))
    fixtures["finetune_start"] = job
    deadline = time.time() + 300
    while True:
        job = must(client.get(f"/jobs/{job['job_id']}"))
        if job["state"] in ("done", "failed"):
            break
        if time.time() > deadline:
            raise SystemExit("fine-tune job did not finish within 300s")
        time.sleep(0.5)
    if job["state"] != "done":
        raise SystemExit(f"fine-tune job failed: {job['message']}")
    fixtures["finetune_done"] = job

    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(fixtures, indent=1) + "\n")
    print(f"wrote {OUT} ({OUT.stat().st_size / 1024:.0f} KiB)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
