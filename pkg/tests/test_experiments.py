import numpy as np
import pytest

from g2ra import experiments as X
from g2ra.config import load_config
from g2ra.fusion import load_checkpoint
from g2ra.metrics import load_rows
from g2ra.world import TOKENS_PER_VIEW, VIEWS


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    from conftest import TINY_YAML
    path = out / "c.yaml"
    path.write_text(TINY_YAML.format(out=out / "run"))
    cfg = load_config(path)
    rows = X.run_sweep(cfg)
    return cfg, rows, out / "run"


def test_sweep_grid_is_complete(sweep):
    cfg, rows, _ = sweep
    cells = {(r["eta"], r["alpha"]) for r in rows}
    assert cells == {(e, a) for e in cfg.sweep.eta for a in cfg.sweep.alpha}
    assert len(rows) == 27
    for r in rows:
        assert r["split"] in ("full", "easy", "hard")
        assert all(np.isfinite(r[k]) for k in ("ne", "sr", "osr", "spl"))


def test_sweep_flags_exactly_one_best_cell(sweep):
    _, rows, out = sweep
    flagged = {(r["eta"], r["alpha"]) for r in rows if r["best"]}
    assert len(flagged) == 1
    full = [r for r in rows if r["split"] == "full"]
    best = next(r for r in full if r["best"])
    assert best["sr"] == max(r["sr"] for r in full)
    assert "*" in (out / "sweep.txt").read_text()
    assert load_rows((out / "sweep.jsonl").read_text()) == rows


def test_sweep_grid_file_round_trips(sweep):
    _, rows, out = sweep
    text = (out / "sweep_grid.tsv").read_text()
    parsed = X.parse_sweep_grid(text)
    assert X.sweep_grid_tsv(parsed) == text
    for p, r in zip(parsed, rows):
        assert all(p[k] == r[k] for k in X.GRID_COLUMNS)


def test_eta_zero_column_has_zero_injection_response(sweep):
    cfg, _, out = sweep
    for eta in cfg.sweep.eta:
        for alpha in cfg.sweep.alpha:
            cell = out / "cells" / f"eta{eta:g}_alpha{alpha:g}" / "responses"
            grid = X.parse_map((cell / "delta_gpi.tsv").read_text())
            assert grid.shape == (len(VIEWS), TOKENS_PER_VIEW)
            if eta == 0:
                assert np.all(grid == 0.0)
            else:
                assert np.any(grid != 0.0)


def test_sweep_cells_share_initialization(sweep):
    cfg, _, out = sweep
    # cells are trained from one init seed: untrained weights agree, so the epoch-0 rows match
    logs = [load_rows((out / "cells" / f"eta{e:g}_alpha0.5" / "train_log.jsonl").read_text())
            for e in cfg.sweep.eta]
    assert cfg.sweep.eta[0] == 0.0 and len(logs) == 3
    cks = [load_checkpoint(out / "cells" / f"eta{e:g}_alpha0.5" / "checkpoint.json")[0]
           for e in cfg.sweep.eta]
    assert [c.fixed_eta for c in cks] == cfg.sweep.eta


def test_response_maps_with_forced_gate(sweep, tmp_path):
    cfg, _, out = sweep
    ck = out / "cells" / "eta0.5_alpha0.5" / "checkpoint.json"
    maps = X.run_dump(cfg, ck, tmp_path, alpha=0.0)
    assert set(maps) == set(X.RESPONSE_MAPS)
    np.testing.assert_allclose(maps["fused_after_gar"], maps["q_before_gpi"], atol=1e-12)
    np.testing.assert_allclose(maps["delta_gar"], -maps["delta_gpi"], atol=1e-12)
    for name in X.RESPONSE_MAPS:
        np.testing.assert_array_equal(X.parse_map((tmp_path / f"{name}.tsv").read_text()), maps[name])


def test_ablation_rows(tiny_config):
    cfg = load_config(tiny_config)
    cfg.ablate.variants = ["full", "two_d_only"]
    summary = X.run_ablate(cfg)
    assert [(r["variant"], r["split"]) for r in summary] == [
        (v, s) for v in ("full", "two_d_only") for s in ("full", "easy", "hard")]
    text = (tiny_config.parent / "run" / "ablation.txt").read_text()
    for col in ("NE", "SR", "OSR", "SPL", "NDTW", "SDTW", "SMOOTH_MEAN", "SMOOTH_VAR"):
        assert col in text.split("\n")[0]


def test_ablation_shares_episode_set(tiny_config):
    cfg = load_config(tiny_config)
    a = [s.scene_id for s in X.eval_scenes(cfg)]
    assert len(a) == 2 * cfg.eval.episodes_per_split and len(set(a)) == len(a)
    assert a == [s.scene_id for s in X.eval_scenes(cfg)]


def test_mean_rows_skips_undefined():
    rows = [{"variant": "v", "sr": 10.0, "smooth_mean": None}, {"variant": "v", "sr": 20.0, "smooth_mean": 4.0}]
    assert X.mean_rows(rows) == {"variant": "v", "sr": 15.0, "smooth_mean": 4.0}


def test_best_cell_tie_break():
    rows = [dict(eta=0.0, alpha=0.2, split="full", sr=50.0, ne=30.0),
            dict(eta=0.5, alpha=0.2, split="full", sr=50.0, ne=20.0),
            dict(eta=1.0, alpha=0.2, split="full", sr=40.0, ne=1.0)]
    assert X.best_cell(rows) == (0.5, 0.2)


def test_parse_grid_rejects_other_files():
    with pytest.raises(ValueError):
        X.parse_sweep_grid("a\tb\n1\t2\n")
