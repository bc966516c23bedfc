import json

import numpy as np
import pytest
from PIL import Image

from cartoseg.data import (
    DatasetManifest,
    FewShotSpec,
    ManifestRecord,
    SegmentationSample,
    few_shot_select,
    load_container,
    load_manifest,
    load_sample,
    resize_bilinear,
    save_container,
    save_manifest,
    stitch_tiles,
    synth_generate,
    tile_image,
    write_synth_dataset,
)
from cartoseg.errors import ConfigError, ContainerFormatError, DimensionError


# ---------------------------------------------------------------- tiling

def test_tile_896_exact_cover():
    scan = np.random.default_rng(0).random((896, 896, 3)).astype(np.float32)
    tiles, layout = tile_image(scan, 448)
    assert len(tiles) == 4
    assert layout.padded_shape == (896, 896)
    assert tiles[1].origin == (0, 448)


def test_tile_500_padding_bookkeeping():
    # Index-arithmetic oracle: two 448 starts per axis, padded to 896,
    # so the second tile overlaps 396 reflected pixels per axis.
    scan = np.random.default_rng(1).random((500, 500)).astype(np.float32)
    tiles, layout = tile_image(scan, 448)
    assert len(tiles) == 4
    assert layout.padded_shape == (896, 896)
    assert layout.origins == ((0, 0), (0, 448), (448, 0), (448, 448))
    assert layout.padded_shape[0] - layout.scan_shape[0] == 396


def test_tile_stitch_roundtrip_exact():
    rng = np.random.default_rng(2)
    mask = (rng.random((700, 900)) > 0.5).astype(np.uint8)
    tiles, layout = tile_image(mask.astype(np.float32)[:, :, None], 256, mask=mask)
    full = stitch_tiles([t.mask for t in tiles], layout)
    np.testing.assert_array_equal(full, mask)


def test_tile_stitch_roundtrip_random_sizes():
    rng = np.random.default_rng(3)
    for _ in range(10):
        h = int(rng.integers(50, 600))
        w = int(rng.integers(50, 600))
        tile = int(rng.integers(32, 257))
        scan = rng.random((h, w, 2)).astype(np.float32)
        tiles, layout = tile_image(scan, tile)
        full = stitch_tiles([t.image for t in tiles], layout)
        np.testing.assert_array_equal(full, scan)


def test_tiny_scan_single_padded_tile_with_warning():
    scan = np.random.default_rng(4).random((100, 80)).astype(np.float32)
    with pytest.warns(UserWarning, match="smaller"):
        tiles, layout = tile_image(scan, 448)
    assert len(tiles) == 1
    assert tiles[0].image.shape == (448, 448, 1)


def test_tile_ignores_are_tiled_identically():
    rng = np.random.default_rng(5)
    scan = rng.random((300, 300)).astype(np.float32)
    ignore = (rng.random((300, 300)) > 0.8).astype(np.uint8)
    tiles, layout = tile_image(scan, 128, ignore=ignore)
    full = stitch_tiles([t.ignore for t in tiles], layout)
    np.testing.assert_array_equal(full, ignore)


def test_stitch_average_mode():
    layout_tiles, layout = tile_image(np.zeros((64, 64), np.float32), 64)
    out = stitch_tiles([np.full((64, 64), 0.6, np.float32)], layout, average_overlaps=True)
    np.testing.assert_allclose(out, 0.6)


def test_tile_bad_stride():
    with pytest.raises(ConfigError):
        tile_image(np.zeros((64, 64)), 32, stride=64)


# ---------------------------------------------------------------- resize

def test_resize_constant_roundtrip_exact():
    const = np.full((224, 224, 3), 0.41, dtype=np.float32)
    up = resize_bilinear(const, 672, 672)
    down = resize_bilinear(up, 224, 224)
    np.testing.assert_array_equal(up[0, 0], const[0, 0])
    np.testing.assert_array_equal(down, const)


def test_resize_identity_bit_equal():
    rng = np.random.default_rng(0)
    img = rng.random((31, 17, 3)).astype(np.float32)
    out = resize_bilinear(img, 31, 17)
    assert out is not img
    np.testing.assert_array_equal(out, img)


def test_resize_2x2_to_4x4_closed_form():
    grid = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.float64)
    out = resize_bilinear(grid, 4, 4)
    # Half-pixel centers: target pixel 1 samples source coord 0.25, so the
    # inner values mix 0.75/0.25; computed by hand per channel of the oracle.
    def ref(y, x):
        sy = np.clip((y + 0.5) / 2 - 0.5, 0, 1)
        sx = np.clip((x + 0.5) / 2 - 0.5, 0, 1)
        y0, x0 = int(np.floor(sy)), int(np.floor(sx))
        y1, x1 = min(y0 + 1, 1), min(x0 + 1, 1)
        dy, dx = sy - y0, sx - x0
        top = grid[y0, x0] + dx * (grid[y0, x1] - grid[y0, x0])
        bot = grid[y1, x0] + dx * (grid[y1, x1] - grid[y1, x0])
        return top + dy * (bot - top)

    expected = np.array([[ref(y, x) for x in range(4)] for y in range(4)])
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_resize_preserves_mean_of_smooth_images():
    y, x = np.mgrid[0:64, 0:64] / 64.0
    smooth = (np.sin(2 * np.pi * y) * np.cos(2 * np.pi * x) * 0.25 + 0.5).astype(np.float64)
    out = resize_bilinear(smooth, 192, 192)
    assert abs(out.mean() - smooth.mean()) < 1e-3


# ---------------------------------------------------------------- few-shot

def build_manifest(n=10):
    records = [
        ManifestRecord(id=f"t{i:02d}", image=f"i{i}.png", mask=f"m{i}.png", role="train")
        for i in range(n)
    ]
    records.append(ManifestRecord(id="v0", image="v.png", mask="vm.png", role="val"))
    return DatasetManifest(class_name="c", records=records)


def test_few_shot_full_size_canonical_order():
    manifest = build_manifest(10)
    out = few_shot_select(manifest, FewShotSpec(k=10, seed=3))
    assert [r.id for r in out] == [f"t{i:02d}" for i in range(10)]


def test_few_shot_deterministic_and_seed_sensitive():
    manifest = build_manifest(10)
    a = few_shot_select(manifest, FewShotSpec(k=5, seed=0))
    b = few_shot_select(manifest, FewShotSpec(k=5, seed=0))
    c = few_shot_select(manifest, FewShotSpec(k=5, seed=1))
    assert [r.id for r in a] == [r.id for r in b]
    assert [r.id for r in a] != [r.id for r in c]
    # subset order follows the manifest
    ids = [r.id for r in a]
    assert ids == sorted(ids)


def test_few_shot_is_function_of_digest():
    m1 = build_manifest(10)
    m2 = build_manifest(10)
    assert m1.digest() == m2.digest()
    a = few_shot_select(m1, FewShotSpec(k=4, seed=9))
    b = few_shot_select(m2, FewShotSpec(k=4, seed=9))
    assert [r.id for r in a] == [r.id for r in b]


def test_few_shot_k_too_large():
    with pytest.raises(ConfigError, match="exceeds"):
        few_shot_select(build_manifest(5), FewShotSpec(k=6))


def test_few_shot_pinned_ids():
    manifest = build_manifest(10)
    out = few_shot_select(manifest, FewShotSpec(k=2), pinned_ids=["t03", "t07"])
    assert [r.id for r in out] == ["t03", "t07"]
    with pytest.raises(ConfigError, match="not in train"):
        few_shot_select(manifest, FewShotSpec(k=1), pinned_ids=["zz"])


# ---------------------------------------------------------------- synth

def test_synth_deterministic():
    a = synth_generate(7, 4, "linear-features", size=96)
    b = synth_generate(7, 4, "linear-features", size=96)
    for s, t in zip(a, b):
        np.testing.assert_array_equal(s.image, t.image)
        np.testing.assert_array_equal(s.mask, t.mask)


def test_synth_foreground_fraction_bounds():
    for klass in ("linear-features", "areal-features"):
        for s in synth_generate(11, 8, klass):
            frac = s.mask.mean()
            assert 0.01 <= frac <= 0.5, (klass, frac)


def test_synth_count_zero_rejected():
    with pytest.raises(ConfigError):
        synth_generate(0, 0, "linear-features")
    with pytest.raises(ConfigError):
        synth_generate(0, 2, "roads")


def test_synth_linear_mask_lies_on_ink():
    # Foreground mask pixels must be inked (darker than any background tone).
    for s in synth_generate(3, 3, "linear-features"):
        fg_pixels = s.image[s.mask.astype(bool)]
        assert fg_pixels.mean(axis=-1).max() < 0.5


def test_synth_areal_hatching_inside_mask():
    for s in synth_generate(5, 3, "areal-features"):
        dark = s.image.mean(axis=-1) < 0.5
        inked_inside = (dark & s.mask.astype(bool)).sum()
        assert inked_inside > 0
        assert 0.1 < inked_inside / s.mask.sum() < 0.9  # hatched, not filled


def test_write_synth_dataset_split(tmp_path):
    samples = synth_generate(0, 10, "areal-features", size=64)
    manifest_path = write_synth_dataset(tmp_path / "ds", samples, "areal-features")
    manifest = load_manifest(manifest_path)
    assert len(manifest.split("train")) == 7
    assert len(manifest.split("val")) == 1
    assert len(manifest.split("test")) == 2
    sample = load_sample(manifest.split("train")[0], manifest.base_dir)
    assert sample.image.shape == (64, 64, 3)
    assert set(np.unique(sample.mask)) <= {0, 1}


def test_write_synth_dataset_explicit_split(tmp_path):
    samples = synth_generate(0, 8, "linear-features", size=64)
    manifest_path = write_synth_dataset(tmp_path / "ds", samples, "x", split=(5, 1, 2))
    manifest = load_manifest(manifest_path)
    assert [len(manifest.split(r)) for r in ("train", "val", "test")] == [5, 1, 2]
    with pytest.raises(ConfigError, match="sum"):
        write_synth_dataset(tmp_path / "ds2", samples, "x", split=(5, 1, 1))


# ---------------------------------------------------------------- container

def test_container_empty(tmp_path):
    path = save_container(tmp_path / "empty.ct", {})
    tensors, meta = load_container(path)
    assert tensors == {} and meta == {}


def test_container_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "w": rng.standard_normal((3, 4)).astype(np.float32),
        "b64": rng.standard_normal(7),
        "idx": np.arange(-3, 3, dtype=np.int64),
        "flags": np.array([True, False, True]),
        "bytes": rng.integers(0, 255, size=(2, 2), dtype=np.uint8).astype(np.uint8),
        "scalar": np.float64(3.25).reshape(()),
    }
    path = save_container(tmp_path / "x.ct", tensors, {"note": "hi"})
    back, meta = load_container(path)
    assert meta == {"note": "hi"}
    assert set(back) == set(tensors)
    for name, arr in tensors.items():
        assert back[name].dtype == np.asarray(arr).dtype
        assert back[name].shape == np.asarray(arr).shape
        np.testing.assert_array_equal(back[name], arr)


def test_container_nan_bits_preserved(tmp_path):
    weird = np.array([np.nan, np.inf, -0.0], dtype=np.float32)
    path = save_container(tmp_path / "n.ct", {"x": weird})
    back, _ = load_container(path)
    np.testing.assert_array_equal(back["x"].view(np.uint32), weird.view(np.uint32))


def _corrupt_header(path, mutate):
    blob = bytearray(path.read_bytes())
    header_len = int.from_bytes(blob[8:16], "little")
    header = json.loads(bytes(blob[16: 16 + header_len]).decode())
    mutate(header)
    new_header = json.dumps(header).encode()
    out = bytes(blob[:8]) + len(new_header).to_bytes(8, "little") + new_header + bytes(blob[16 + header_len:])
    path.write_bytes(out)


def test_container_rejects_offset_overlap(tmp_path):
    path = save_container(
        tmp_path / "o.ct",
        {"a": np.zeros(4, np.float32), "b": np.ones(4, np.float32)},
    )

    def overlap(header):
        header["tensors"]["b"]["offset"] = header["tensors"]["a"]["offset"] + 4

    _corrupt_header(path, overlap)
    with pytest.raises(ContainerFormatError, match="overlaps"):
        load_container(path)


def test_container_rejects_out_of_bounds(tmp_path):
    path = save_container(tmp_path / "t.ct", {"only": np.zeros(8, np.float32)})

    def out_of_bounds(header):
        header["tensors"]["only"]["offset"] = 100

    _corrupt_header(path, out_of_bounds)
    with pytest.raises(ContainerFormatError, match="only"):
        load_container(path)


def test_container_rejects_truncated_payload(tmp_path):
    path = save_container(tmp_path / "t.ct", {"only": np.zeros(64, np.float32)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-10])
    with pytest.raises(ContainerFormatError, match="only"):
        load_container(path)


def test_container_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ct"
    path.write_bytes(b"NOTATENSORFILE")
    with pytest.raises(ContainerFormatError, match="magic"):
        load_container(path)


def test_container_rejects_size_mismatch(tmp_path):
    path = save_container(tmp_path / "s.ct", {"x": np.zeros((2, 2), np.float32)})

    def wrong_shape(header):
        header["tensors"]["x"]["shape"] = [2, 3]

    _corrupt_header(path, wrong_shape)
    with pytest.raises(ContainerFormatError, match="x"):
        load_container(path)


# ---------------------------------------------------------------- manifests

def test_manifest_roundtrip(tmp_path):
    manifest = build_manifest(3)
    path = save_manifest(manifest, tmp_path / "m.json")
    back = load_manifest(path, check_files=False)
    assert back.class_name == "c"
    assert [r.id for r in back.records] == [r.id for r in manifest.records]


def test_manifest_missing_file_rejected(tmp_path):
    save_manifest(build_manifest(1), tmp_path / "m.json")
    with pytest.raises(ConfigError, match="missing file"):
        load_manifest(tmp_path / "m.json")


def test_manifest_duplicate_id_rejected(tmp_path):
    payload = {
        "class_name": "c",
        "samples": [
            {"id": "a", "image": "i.png", "mask": "m.png", "role": "train"},
            {"id": "a", "image": "i.png", "mask": "m.png", "role": "test"},
        ],
    }
    path = tmp_path / "m.json"
    path.write_text(json.dumps(payload))
    with pytest.raises(ConfigError, match="duplicate"):
        load_manifest(path, check_files=False)


def test_load_sample_binarizes_mask(tmp_path):
    Image.fromarray(np.full((8, 8, 3), 200, np.uint8)).save(tmp_path / "i.png")
    mask = np.zeros((8, 8), np.uint8)
    mask[:4] = 127  # at the threshold -> background
    mask[4:] = 128  # just above -> foreground
    Image.fromarray(mask).save(tmp_path / "m.png")
    record = ManifestRecord(id="s", image="i.png", mask="m.png", role="train")
    sample = load_sample(record, tmp_path)
    assert sample.mask[:4].sum() == 0
    assert sample.mask[4:].all()
    assert sample.image.dtype == np.float32
    assert sample.image.max() <= 1.0


def test_sample_validation():
    with pytest.raises(DimensionError):
        SegmentationSample(
            image=np.zeros((4, 4, 1), np.float32), mask=np.zeros((5, 4), np.uint8)
        ).validate()
    with pytest.raises(DimensionError, match="mask values"):
        SegmentationSample(
            image=np.zeros((4, 4, 1), np.float32), mask=np.full((4, 4), 2, np.uint8)
        ).validate()
