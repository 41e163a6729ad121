import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import simco.count as count_mod
from simco.cluster import ClusterResult, SeedsNotSeparable
from simco.detect import Detection
from simco.shapegen import (
    AlignedGrid,
    BackgroundSpec,
    GeneratorConfig,
    ImageRecord,
    ObjectType,
    ShapeClass,
    ShapeInstance,
    generate_dataset,
    layout_instances,
    rasterize,
)
from simco.count import (
    REFERENCE_CELLS,
    REFERENCE_REPTILE,
    ClusterCount,
    CountReport,
    PipelineConfig,
    bind_seeds,
    count_clusters,
    eval_dataset,
    mae,
    match_clusters_to_gt,
    nmae,
    run_pipeline,
    seed_boxes_for,
)

RED_SQUARE = ObjectType(ShapeClass.RECTANGLE, (220, 30, 30), 0.1, 0.0)
BLUE_HEX = ObjectType(ShapeClass.HEXAGON, (30, 60, 230), 0.08, 0.3)


def _record_from(groups, w=512, h=512, noise=12.0, bg=(90, 150, 90)):
    """groups: list of (type, layout, region)."""
    rng = np.random.default_rng(0)
    instances, occupied = [], []
    for t, layout, region in groups:
        placed = layout_instances(rng, t, layout, w, h, region=region, occupied=occupied)
        instances.extend(placed)
    types = list(dict.fromkeys(i.type for i in instances))
    rec = ImageRecord("fixture", w, h, BackgroundSpec(bg, noise_amplitude=noise, noise_seed=4), instances, types)
    return rec, rasterize(rec)


# ---------------------------------------------------------------- metrics


def test_mae_examples():
    assert mae([3, 4], [3, 4]) == 0.0
    assert mae([5, 10], [4, 12]) == 1.5
    with pytest.raises(ValueError):
        mae([1], [1, 2])
    with pytest.raises(ValueError):
        mae([], [])


def test_nmae_examples():
    assert nmae([3, 4], [3, 4]) == 0.0
    assert nmae([47], [50]) == pytest.approx(0.06)
    assert nmae([5, 10], [4, 12]) == pytest.approx(1.5 * 2 / 16)
    assert nmae([2, 1], [1, 4], "mean_relative") == pytest.approx((1 + 0.75) / 2)
    with pytest.raises(ValueError):
        nmae([1, 2], [0, 0])
    with pytest.raises(ValueError):
        nmae([1, 2], [1, 0], "mean_relative")
    with pytest.raises(ValueError):
        nmae([1], [1], "median")


counts = st.lists(st.tuples(st.integers(0, 60), st.integers(1, 60)), min_size=1, max_size=30)


@settings(max_examples=300, deadline=None)
@given(counts, st.randoms(use_true_random=False))
def test_metric_identities(pairs, rnd):
    preds = [p for p, _ in pairs]
    gts = [g for _, g in pairs]
    ref = sum(abs(p - g) for p, g in pairs) / len(pairs)
    assert mae(preds, gts) == pytest.approx(ref)
    assert nmae(preds, gts) == pytest.approx(mae(preds, gts) * len(gts) / sum(gts))
    assert (mae(preds, gts) == 0) == (preds == gts) == (nmae(preds, gts) == 0)
    order = list(range(len(pairs)))
    rnd.shuffle(order)
    assert mae([preds[i] for i in order], [gts[i] for i in order]) == pytest.approx(mae(preds, gts))


def test_reference_constants_recorded():
    assert REFERENCE_CELLS == {"mae": 12.0, "nmae": 0.07}
    assert REFERENCE_REPTILE == {"mae": 8.66, "nmae": 0.086}


# ---------------------------------------------------------------- matching


def _merge_record():
    rec, _ = _record_from([(RED_SQUARE, AlignedGrid(1, 3), (0, 0, 512, 256)),
                           (BLUE_HEX, AlignedGrid(1, 2), (0, 256, 512, 512))], noise=0.0)
    return rec


def test_match_perfect_pipeline():
    rec = _merge_record()
    dets = [Detection(i.bbox) for i in rec.instances]
    report = CountReport("x", "seeded", 0.0, dets, [ClusterCount(0, [0, 1, 2]), ClusterCount(3, [3, 4])])
    assert match_clusters_to_gt(report, rec) == [(0, 3, 3), (1, 2, 2)]


def test_match_merged_cluster():
    rec = _merge_record()
    dets = [Detection(i.bbox) for i in rec.instances]
    report = CountReport("x", "seeded", 0.0, dets, [ClusterCount(0, [0, 1, 2, 3, 4])])
    units = match_clusters_to_gt(report, rec)
    assert units == [(0, 5, 3), (1, 0, 2)]
    assert [abs(p - g) for _, p, g in units] == [2, 2]


def test_match_tie_goes_to_lowest_type_and_unmatched_not_credited():
    rec = _merge_record()
    dets = [Detection(i.bbox) for i in rec.instances] + [Detection((500, 500, 510, 510))]
    report = CountReport("x", "seeded", 0.0, dets,
                         [ClusterCount(0, [0, 3]), ClusterCount(5, [5])])
    assert match_clusters_to_gt(report, rec) == [(0, 2, 3), (1, 0, 2)]
    # targets restrict the units
    assert match_clusters_to_gt(report, rec, targets=[1]) == [(1, 0, 2)]


def test_match_totals_conserved_under_perturbation(rng):
    rec = _merge_record()
    n = len(rec.instances)
    for _ in range(200):
        dets = []
        for inst in rec.instances:
            x0, y0, x1, y1 = inst.bbox
            dx, dy = rng.integers(-2, 3, size=2)
            dets.append(Detection((max(x0 + dx, 0), max(y0 + dy, 0), x1 + dx, y1 + dy)))
        labels = rng.integers(0, 3, size=n)
        groups = [np.flatnonzero(labels == k).tolist() for k in range(3)]
        clusters = [ClusterCount(g[0], g) for g in groups if g]
        report = CountReport("x", "unsupervised", 0.0, dets, clusters)
        units = match_clusters_to_gt(report, rec)
        assert sum(p for _, p, _ in units) == report.total == n


# ---------------------------------------------------------------- pipeline


def test_bind_seeds():
    dets = [Detection((0, 0, 10, 10)), Detection((20, 20, 30, 30))]
    assert bind_seeds(dets, [(21, 21, 31, 31), (0, 0, 10, 10)]) == [1, 0]
    with pytest.raises(ValueError):
        bind_seeds(dets, [(100, 100, 110, 110)])
    with pytest.raises(ValueError):
        bind_seeds(dets, [(0, 0, 10, 10), (1, 1, 10, 10)])


def test_zero_detections_total_zero(small):
    blank = np.full((128, 128, 3), 40, dtype=np.uint8)
    report = run_pipeline(blank, small.net, PipelineConfig(detector="blob"))
    assert report.total == 0 and report.clusters == []
    empty = ImageRecord("e", 128, 128, None, [], [])
    assert run_pipeline(blank, small.net, PipelineConfig(), empty).total == 0


@pytest.mark.slow
def test_two_types_four_and_six(desk):
    rec, img = _record_from([(RED_SQUARE, AlignedGrid(2, 2, 0.1), (0, 0, 256, 512)),
                             (BLUE_HEX, AlignedGrid(3, 2, 0.1), (256, 0, 512, 512))])
    assert [i.type for i in rec.instances].count(RED_SQUARE) == 4
    assert [i.type for i in rec.instances].count(BLUE_HEX) == 6
    for detector in ("oracle", "blob"):
        report = run_pipeline(img, desk.net, PipelineConfig(detector=detector), rec, seed_boxes_for(rec))
        assert sorted(c.count for c in report.clusters) == [4, 6]
        assert len(report.clusters) == len(report.seeds) == 2
        assert report.total == sum(c.count for c in report.clusters)
        assert match_clusters_to_gt(report, rec) == [(0, 4, 4), (1, 6, 6)]


def test_unsupervised_five_identical(small):
    t = ObjectType(ShapeClass.PENTAGON, (250, 200, 20), 0.1, 0.0)
    # integer-spaced centers on a flat background give pixel-identical crops
    insts = [ShapeInstance(t, (60.5 + 90 * k, 256.5), (0, 0, 1, 1)) for k in range(5)]
    rec = ImageRecord("five", 512, 512, BackgroundSpec((20, 20, 60), noise_amplitude=0.0), insts, [t])
    img = rasterize(rec)
    for detector in ("oracle", "blob"):
        report = run_pipeline(img, small.net, PipelineConfig(detector=detector, mode="unsupervised"), rec)
        assert [c.count for c in report.clusters] == [5]


def test_seeded_requires_seeds(small):
    rec, img = _record_from([(RED_SQUARE, AlignedGrid(1, 3), None)])
    with pytest.raises(ValueError):
        run_pipeline(img, small.net, PipelineConfig(), rec, None)


def test_unseparable_seeds_propagate_or_fall_back():
    dets = [Detection((0, 0, 5, 5)), Detection((10, 10, 15, 15)), Detection((20, 20, 25, 25))]
    Y = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(SeedsNotSeparable):
        count_clusters("x", dets, Y, PipelineConfig(), [0, 1])
    report = count_clusters("x", dets, Y, PipelineConfig(), [0, 1], fallback=True)
    assert report.note and report.result is not None


def test_pipeline_config_roundtrip_and_hash():
    cfg = PipelineConfig(detector="blob", mode="unsupervised", preference=-0.5)
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.hash() == PipelineConfig.from_dict(cfg.to_dict()).hash() != PipelineConfig().hash()
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        PipelineConfig(detector="rpn")


# ---------------------------------------------------------------- dataset evaluation


@pytest.fixture
def tiny_dataset(tmp_path):
    return generate_dataset(GeneratorConfig(num_images=10, width=256, height=256, noise_amplitude=0.0), 5, tmp_path), tmp_path


def test_eval_perfect_embedding_gives_zero_error(tiny_dataset, monkeypatch, small):
    manifest, root = tiny_dataset
    lookup = {}
    for rec in manifest.records:
        for inst in rec.instances:
            lookup[(rec.id, inst.bbox)] = rec.type_index(inst.type)

    current = {}

    def oracle_describe(raster, dets, net, patch=16):
        # unit descriptors encoding the true type index
        Y = np.zeros((len(dets), 8))
        for j, d in enumerate(dets):
            Y[j, lookup[(current["id"], d.bbox)]] = 1.0
        return Y

    real_run = count_mod.run_pipeline

    def tracking_run(raster, net, config, record=None, *a, **k):
        current["id"] = record.id
        return real_run(raster, net, config, record, *a, **k)

    monkeypatch.setenv("SIMCO_THREADS", "1")
    monkeypatch.setattr(count_mod, "describe", oracle_describe)
    monkeypatch.setattr(count_mod, "run_pipeline", tracking_run)
    for mode in ("seeded", "unsupervised"):
        s = eval_dataset(manifest, root, small.net, PipelineConfig(mode=mode), split="train")
        assert s.mae == 0.0 and s.nmae == 0.0 and not s.errors
        assert s.n_units == sum(len(manifest.records[i].types_present) for i in manifest.split_indices("train"))


def test_eval_deterministic_csv_and_errors(tiny_dataset, small):
    manifest, root = tiny_dataset
    a = eval_dataset(manifest, root, small.net, PipelineConfig(), split="train")
    b = eval_dataset(manifest, root, small.net, PipelineConfig(), split="train", limit=100)
    assert a.to_csv() == b.to_csv()
    assert a.to_csv().splitlines()[0] == "image_id,type_id,pred,gt,abs_err"
    assert set(a.summary()) == {"mae", "nmae", "n_units", "config_hash"}
    # a missing raster is reported per image, not raised
    (root / manifest.files[0]).unlink()
    c = eval_dataset(manifest, root, small.net, PipelineConfig(), split="train")
    assert c.errors and c.errors[0][0] == manifest.records[0].id
    assert c.n_units == a.n_units


def test_eval_empty_split_raises(tiny_dataset, small):
    manifest, root = tiny_dataset
    with pytest.raises(ValueError):
        eval_dataset(manifest, root, small.net, PipelineConfig(), split="nonexistent")
