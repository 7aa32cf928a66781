import base64
import json
import threading
import time
import urllib.error
import urllib.request

import pytest

from crossmine import service
from crossmine.al import AnnotationRequest, SimulatedOracle
from crossmine.cli import main as cli_main
from crossmine.engine import MiningConfig, run as run_engine
from crossmine.report import IncompleteRunError, generate_report
from crossmine.synthbench import SceneSpec, generate_dataset, load_dataset


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(
        SceneSpec(num_categories=3, train_labeled=24, unlabeled=20, test=8, seed=23)
    )


@pytest.fixture(scope="module")
def run_config():
    return MiningConfig.from_preset(
        "desk",
        seed=77,
        annotation_batch=3,
        batches_per_round=6,
        rescore_every=3,
        images_per_rescore=6,
        score_top_per_image=4,
        warmup_steps=1200,
        annotation_fraction=0.6,
        tau_low=0.2,
        annotation_budget=9,
    )


@pytest.fixture(scope="module")
def finished_run_dir(tmp_path_factory, dataset, run_config):
    run_dir = tmp_path_factory.mktemp("run")
    run_engine(run_config, dataset, SimulatedOracle(dataset), run_dir)
    return run_dir


def _request(i, image, box):
    from crossmine.al import render_thumbnail

    return AnnotationRequest(
        request_id=f"q{i}",
        proposal_id=f"p{i}",
        image_id=image.id,
        box=box,
        s_score=0.04,
        positive_categories=[0, 1],
        thumbnail_png=render_thumbnail(image, box),
        created_round=1,
    )


def _get(url):
    with urllib.request.urlopen(url, timeout=5) as response:
        return json.loads(response.read().decode("utf-8"))


def _post(url, body):
    data = json.dumps(body).encode("utf-8")
    request = urllib.request.Request(url, data=data, method="POST",
                                     headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(request, timeout=5) as response:
            return response.status, json.loads(response.read().decode("utf-8"))
    except urllib.error.HTTPError as err:
        return err.code, json.loads(err.read().decode("utf-8"))


@pytest.fixture()
def api(dataset, tmp_path):
    annotator = service.QueueAnnotator(tmp_path)
    stats = service.EngineStats()
    server = service.serve(annotator, stats, 0)
    port = server.server_address[1]
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield annotator, stats, f"http://127.0.0.1:{port}"
    annotator.close()
    server.shutdown()


def test_queue_mirror_and_submission(api, dataset):
    annotator, stats, base = api
    images = dataset.split("unlabeled")
    requests = [
        _request(i, images[i], images[i].objects[0].box) for i in range(3)
    ]
    out = {}

    def engine_side():
        out["results"] = annotator.annotate(requests)

    worker = threading.Thread(target=engine_side)
    worker.start()
    time.sleep(0.1)

    queue = _get(base + "/api/queue")
    assert len(queue) == 3
    item = queue[0]
    assert set(item) >= {"request_id", "image_id", "box", "s_score",
                         "positive_categories", "thumbnail_png_base64", "round"}
    thumb = base64.b64decode(item["thumbnail_png_base64"])
    matching = next(r for r in requests if r.request_id == item["request_id"])
    assert thumb == matching.thumbnail_png

    for item in queue:
        status, body = _post(base + "/api/labels", {"request_id": item["request_id"], "label": 1})
        assert status == 200 and body["status"] == "ok"
    worker.join(timeout=5)
    assert not worker.is_alive()
    assert len(out["results"]) == 3
    assert all(r.label == 1 for r in out["results"])


def test_submit_is_idempotent(api, dataset):
    annotator, _, base = api
    image = dataset.split("unlabeled")[0]
    request = _request(9, image, image.objects[0].box)
    worker = threading.Thread(target=annotator.annotate, args=([request],))
    worker.start()
    time.sleep(0.1)
    body = {"request_id": "q9", "label": 2}
    status1, out1 = _post(base + "/api/labels", body)
    status2, out2 = _post(base + "/api/labels", body)
    assert (status1, out1["status"]) == (200, "ok")
    assert (status2, out2["status"]) == (200, "no-op")
    worker.join(timeout=5)


def test_api_error_codes(api):
    _, _, base = api
    status, _ = _post(base + "/api/labels", {"request_id": "ghost", "label": 1})
    assert status == 404
    status, _ = _post(base + "/api/labels", {"label": 1})
    assert status == 422
    status, _ = _post(base + "/api/labels", {"request_id": "x", "label": "cat"})
    assert status == 422


def test_conflicting_resubmission_is_stale(api, dataset):
    annotator, _, base = api
    image = dataset.split("unlabeled")[0]
    request = _request(11, image, image.objects[0].box)
    worker = threading.Thread(target=annotator.annotate, args=([request],))
    worker.start()
    time.sleep(0.1)
    _post(base + "/api/labels", {"request_id": "q11", "label": 0})
    status, _ = _post(base + "/api/labels", {"request_id": "q11", "label": 2})
    assert status == 409
    worker.join(timeout=5)


def test_stats_endpoint(api):
    _, stats, base = api
    stats.update(rounds=4, annotated_count=12, pseudo_count=30, current_map=0.41)
    out = _get(base + "/api/stats")
    assert out["rounds"] == 4
    assert out["annotated_count"] == 12
    assert out["pseudo_count"] == 30
    assert out["current_map"] == pytest.approx(0.41)


# ------------------------------------------------------------------ reporting


def test_report_outputs(finished_run_dir):
    summary = generate_report(finished_run_dir)
    report_dir = finished_run_dir / "report"
    assert (report_dir / "summary.csv").exists()
    assert (report_dir / "map_vs_annotated.png").exists()
    assert summary["rounds"] >= 1
    header = (report_dir / "summary.csv").read_text().splitlines()[0]
    assert header == "round,annotated,annotated_pct,pseudo,pseudo_pct,map"


def test_report_is_deterministic(finished_run_dir):
    generate_report(finished_run_dir)
    report_dir = finished_run_dir / "report"
    before = {
        p.name: p.read_bytes() for p in sorted(report_dir.iterdir()) if p.is_file()
    }
    generate_report(finished_run_dir)
    after = {
        p.name: p.read_bytes() for p in sorted(report_dir.iterdir()) if p.is_file()
    }
    assert before == after


def test_report_zero_annotations(tmp_path, dataset, run_config):
    import dataclasses

    config = dataclasses.replace(run_config, annotation_budget=0)
    run_dir = tmp_path / "zero"
    run_engine(config, dataset, SimulatedOracle(dataset), run_dir)
    summary = generate_report(run_dir)
    assert summary["annotated_pct"] == 0.0


def test_report_incomplete_run(tmp_path):
    with pytest.raises(IncompleteRunError):
        generate_report(tmp_path)


def test_pseudo_pct_counts_distinct_proposals(finished_run_dir):
    from crossmine.engine import RunLog

    log = RunLog.load(finished_run_dir / "runlog.jsonl")
    distinct = set()
    for event in log.events:
        if event["event"] == "pseudo-assigned":
            distinct.update(e["proposal_id"] for e in event["labels"])
    initial = next(
        e["initial_annotations"] for e in log.events if e["event"] == "run-start"
    )
    summary_rows = (finished_run_dir / "report" / "summary.csv").read_text().splitlines()
    last = summary_rows[-1].split(",")
    assert float(last[4]) == pytest.approx(100.0 * len(distinct) / initial)


# ------------------------------------------------------------------ CLI


def test_cli_gen_run_eval_report(tmp_path, capsys):
    spec = SceneSpec(num_categories=3, train_labeled=12, unlabeled=8, test=4, seed=3)
    spec_path = tmp_path / "scene.json"
    spec_path.write_text(json.dumps(spec.to_json()))
    data_dir = tmp_path / "data"
    assert cli_main(["gen-data", "--spec", str(spec_path), "--out", str(data_dir),
                     "--seed", "5"]) == 0
    loaded = load_dataset(data_dir)
    assert loaded.spec.seed == 5

    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({
        "preset": "desk", "batches_per_round": 2, "rescore_every": 2,
        "images_per_rescore": 2, "score_top_per_image": 2, "warmup_steps": 40,
        "annotation_batch": 2, "annotation_fraction": 0.9,
    }))
    run_dir = tmp_path / "run"
    assert cli_main(["run", "--config", str(config_path), "--data", str(data_dir),
                     "--annotator", "simulated", "--out", str(run_dir),
                     "--budget", "2", "--seed", "9"]) == 0
    assert (run_dir / "runlog.jsonl").exists()
    assert (run_dir / "detector.json").exists()

    assert cli_main(["eval", "--checkpoint", str(run_dir / "detector.json"),
                     "--data", str(data_dir)]) == 0
    out = capsys.readouterr().out
    assert "mAP" in out

    assert cli_main(["report", "--rundir", str(run_dir)]) == 0
    assert (run_dir / "report" / "summary.csv").exists()


def test_cli_rejects_unknown_flags():
    with pytest.raises(SystemExit):
        cli_main(["run", "--nonsense", "x"])
