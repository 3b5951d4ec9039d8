import json

import numpy as np
import pytest

from dc4cr import metrics
from dc4cr.imagery import Image
from dc4cr.synthcloud import (
    build_manifest,
    composite,
    gen_cloud,
    gen_corpus,
    gen_terrain,
    parse_manifest_line,
    read_manifest,
)


def test_terrain_deterministic():
    assert gen_terrain(11, 32).pixels.tobytes() == gen_terrain(11, 32).pixels.tobytes()


def test_terrain_seeds_differ():
    a, b = gen_terrain(1, 32).pixels, gen_terrain(2, 32).pixels
    differing = np.any(a != b, axis=-1).mean()
    assert differing > 0.5


def test_terrain_range_and_size():
    img = gen_terrain(0, 16)
    assert img.shape == (16, 16, 3)
    assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0
    with pytest.raises(ValueError):
        gen_terrain(0, 8)
    with pytest.raises(ValueError):
        gen_terrain(0, 1024)


@pytest.mark.parametrize("seed", range(25))
def test_cloud_type_constraints(seed):
    thin, _ = gen_cloud(seed, 32, "thin")
    assert thin.max() <= 0.6
    assert 0.15 <= thin.mean() <= 0.35
    thick, colour = gen_cloud(seed, 32, "thick")
    assert (thick >= 0.95).mean() >= 0.20
    # feathered: some partial opacity exists
    assert np.any((thick > 0.05) & (thick < 0.95))
    assert colour.pixels.min() >= 0.85


def test_unknown_cloud_type():
    with pytest.raises(ValueError):
        gen_cloud(0, 32, "cirrus")


def test_composite_examples():
    clean = Image(np.full((8, 8, 3), 0.2))
    cloud = Image(np.ones((8, 8, 3)))
    assert composite(clean, np.zeros((8, 8)), cloud) == clean
    assert composite(clean, np.ones((8, 8)), cloud) == cloud
    np.testing.assert_allclose(composite(clean, np.full((8, 8), 0.5), cloud).pixels, 0.6)
    with pytest.raises(ValueError):
        composite(clean, np.zeros((4, 4)), cloud)


def test_composite_monotone_in_alpha():
    clean, (_, colour) = gen_terrain(3, 16), gen_cloud(3, 16, "thin")
    prev = None
    for a in np.linspace(0, 1, 6):
        out = composite(clean, np.full((16, 16), a), colour).pixels
        dist = np.abs(out - colour.pixels)
        if prev is not None:
            assert np.all(dist <= prev + 1e-15)
        prev = dist


def test_thin_pairs_have_higher_psnr_than_thick():
    thin, thick = [], []
    for seed in range(50):
        clean = gen_terrain(seed, 32)
        for kind, acc in (("thin", thin), ("thick", thick)):
            alpha, colour = gen_cloud(seed, 32, kind)
            acc.append(metrics.psnr(composite(clean, alpha, colour), clean))
    assert np.mean(thin) > np.mean(thick)


def test_corpus_counts_and_split(tmp_path):
    m = gen_corpus(0, 10, 16, 0.5, tmp_path / "c10")
    assert sum(e.cloud_type == "thin" for e in m.entries) == 5
    m = gen_corpus(0, 100, 16, 0.3, tmp_path / "c100")
    assert len(m.split("train")) == 80 and len(m.split("test")) == 20


def test_corpus_deterministic_and_loadable(tmp_path):
    gen_corpus(4, 12, 16, 0.5, tmp_path / "a")
    gen_corpus(4, 12, 16, 0.5, tmp_path / "b")
    assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()
    for name in ("clean/00003.png", "cloudy/00007.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    m = read_manifest(tmp_path / "a/manifest.jsonl")
    for e in m.entries:
        cloudy, clean = e.load()
        assert cloudy.shape == clean.shape == (16, 16, 3)


def test_corpus_refuses_non_empty_dir(tmp_path):
    gen_corpus(0, 10, 16, 0.5, tmp_path)
    with pytest.raises(FileExistsError):
        gen_corpus(0, 10, 16, 0.5, tmp_path)
    gen_corpus(0, 10, 16, 0.5, tmp_path, force=True)


def test_manifest_schema(tmp_path):
    gen_corpus(0, 10, 16, 0.5, tmp_path)
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 10
    for line in lines:
        row = json.loads(line)
        assert set(row) == {"id", "clean", "cloudy", "cloud_type", "split"}
        assert not row["clean"].startswith("/")
    with pytest.raises(ValueError):
        parse_manifest_line('{"id": "x"}')
    with pytest.raises(ValueError):
        parse_manifest_line('{"id":"x","clean":"a","cloudy":"b","cloud_type":"fog","split":"train"}')


def test_build_manifest_pairs_by_name(tmp_path):
    from dc4cr.imagery import save_image

    (tmp_path / "gt").mkdir()
    (tmp_path / "in").mkdir()
    for name in ("a", "b", "c", "d", "e"):
        save_image(gen_terrain(ord(name), 16), tmp_path / "gt" / f"{name}.png")
        save_image(gen_terrain(ord(name) + 1, 16), tmp_path / "in" / f"{name}.png")
    save_image(gen_terrain(0, 16), tmp_path / "in" / "orphan.png")
    m = build_manifest(tmp_path / "gt", tmp_path / "in", "thick", tmp_path / "manifest.jsonl")
    assert [e.id for e in m.entries] == ["a", "b", "c", "d", "e"]
    assert len(m.split("train")) == 4
    again = read_manifest(tmp_path / "manifest.jsonl")
    assert [e.cloudy_path for e in again.entries] == [e.cloudy_path for e in m.entries]
