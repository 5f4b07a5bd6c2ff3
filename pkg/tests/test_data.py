from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from vdpo import data as D
from vdpo.data import (
    BOS,
    EOS,
    PAD,
    DatasetFormatError,
    SceneSpec,
    caption_of,
    edge_map,
    level_specs,
    load_dataset,
    make_dataset,
    render_scene,
    save_dataset,
)
from vdpo.numerics import Rng

GOLDEN = Path(__file__).parent / "golden"


def parse_caption(ids):
    """Independent inverse of the caption template."""
    words = [D.WORDS[i] for i in ids]
    assert words[0] == "<bos>" and words[1] == "draw" and words[6] == "<eos>"
    assert words[7:] == ["<pad>"] * (len(words) - 7)
    size, intensity, shape, position = words[2:6]
    return SceneSpec(shape, size, intensity, position)


def all_specs():
    return level_specs(3)


# -- vocabulary ------------------------------------------------------------------


def test_vocabulary_is_a_bijection_with_fixed_specials():
    assert (BOS, EOS, PAD) == (0, 1, 2)
    assert len(D.WORDS) == len(set(D.WORDS)) == D.VOCAB_SIZE <= 32
    assert all(D.WORD_TO_ID[w] == i for i, w in enumerate(D.WORDS))


# -- render_scene ----------------------------------------------------------------


def test_render_is_deterministic_and_in_range():
    for spec in all_specs():
        a, b = render_scene(spec), render_scene(spec)
        assert a.shape == (16, 16)
        assert np.array_equal(a, b)
        assert set(np.unique(a)) <= {0.0, D.INTENSITY_VALUE[spec.intensity]}


def test_bright_is_twice_dim_on_support():
    bright = render_scene(SceneSpec("triangle", "small", "bright", "lower-left"))
    dim = render_scene(SceneSpec("triangle", "small", "dim", "lower-left"))
    support = bright > 0
    assert support.any()
    assert np.array_equal(bright[support] / dim[support], np.full(support.sum(), 2.0))
    assert not dim[~support].any()


def test_center_large_circle_matches_golden_file():
    rows = (GOLDEN / "circle_large_center.txt").read_text().split()
    golden = np.array([[1.0 if ch == "#" else 0.0 for ch in row] for row in rows])
    img = render_scene(SceneSpec("circle", "large", "bright", "center"))
    assert np.array_equal(img, golden)
    assert 40 <= int((img > 0).sum()) <= 60


def test_invalid_spec_field_rejected():
    with pytest.raises(ValueError):
        SceneSpec("hexagon", "large", "bright", "center")


# -- edge_map --------------------------------------------------------------------


def test_constant_image_has_no_edges():
    for v in (0.0, 0.4, 1.0):
        assert not edge_map(np.full((16, 16), v)).any()


def test_single_pixel_marks_its_four_neighbours():
    img = np.zeros((16, 16))
    img[7, 9] = 1.0
    expect = np.zeros((16, 16))
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        expect[7 + dy, 9 + dx] = 1.0
    assert np.array_equal(edge_map(img), expect)


def test_edge_map_is_binary():
    img = Rng(3).uniform((16, 16))
    assert set(np.unique(edge_map(img))) <= {0.0, 1.0}


def test_edge_map_rejects_out_of_range():
    with pytest.raises(ValueError):
        edge_map(np.full((4, 4), 1.5))


def test_sketch_drops_only_edge_pixels():
    target = render_scene(SceneSpec("square", "large", "bright", "center"))
    sketch = D.sketch_map(target, Rng(0))
    edges = edge_map(target)
    assert np.all(sketch <= edges)
    dropped = (edges - sketch).sum() / edges.sum()
    assert 0.0 < dropped < 0.5


# -- captions --------------------------------------------------------------------


def test_caption_template():
    spec = SceneSpec("circle", "large", "bright", "upper-left")
    ids = caption_of(spec)
    words = [D.WORDS[i] for i in ids]
    assert words == ["<bos>", "draw", "large", "bright", "circle", "upper-left", "<eos>", "<pad>"]


def test_captions_injective_and_invertible():
    specs = all_specs()
    caps = [caption_of(s) for s in specs]
    assert len(set(caps)) == len(specs) == 80
    for s, c in zip(specs, caps):
        assert len(c) == D.CAPTION_LEN
        assert parse_caption(c) == s


def test_detokenize_stops_at_eos():
    assert D.detokenize([BOS, 3, 4, EOS, 5, PAD]) == "draw small"


# -- make_dataset ----------------------------------------------------------------


def test_dataset_is_deterministic():
    assert make_dataset(100, 7, 1) == make_dataset(100, 7, 1)
    assert make_dataset(50, 7, 3) != make_dataset(50, 8, 3)


def test_level_one_fixes_everything_but_shape():
    ds = make_dataset(100, 7, 1)
    assert {(s.spec.size, s.spec.intensity, s.spec.position) for s in ds} == {("large", "bright", "center")}
    assert {s.spec.shape for s in ds} == set(D.SHAPES)


def test_level_two_varies_size_and_intensity_only():
    specs = level_specs(2)
    assert len(specs) == 16
    assert {s.position for s in specs} == {"center"}


def test_level_three_shape_balance():
    ds = make_dataset(4000, 11, 3)
    counts = Counter(s.spec.shape for s in ds)
    for shape in D.SHAPES:
        assert abs(counts[shape] - 1000) <= 0.05 * 1000


@pytest.mark.parametrize("task", D.TASKS)
def test_samples_satisfy_invariants(task):
    for s in make_dataset(160, 2, 3, task):
        assert s.caption == caption_of(s.spec)
        assert np.array_equal(s.target, render_scene(s.spec))
        if task == "edge2img":
            assert np.array_equal(s.condition, edge_map(s.target))
        else:
            assert np.all(s.condition <= edge_map(s.target))


def test_bad_level_and_count_rejected():
    with pytest.raises(ValueError):
        make_dataset(10, 0, 4)
    with pytest.raises(ValueError):
        make_dataset(0, 0, 1)


# -- persistence -----------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    ds = make_dataset(40, 5, 3, "sketch2img")
    path = tmp_path / "d.jsonl"
    save_dataset(ds, path)
    assert load_dataset(path) == ds


def test_empty_file_is_empty_dataset(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_dataset(path) == []


def test_truncated_file_names_line(tmp_path):
    path = tmp_path / "d.jsonl"
    save_dataset(make_dataset(3, 0, 1), path)
    text = path.read_text()
    path.write_text(text[: len(text) - 40])
    with pytest.raises(DatasetFormatError, match="line 3"):
        load_dataset(path)
