import numpy as np
import numpy.testing as npt
import pytest

from volnet.data_io import (BadMagicError, DatasetManifest, ManifestEntry,
                            PhantomSpec, TruncatedFileError,
                            UnsupportedDatatypeError, generate_phantoms,
                            load_array, load_manifest, mask_bbox,
                            normalize_volume, read_volume, save_manifest,
                            split_manifest, write_nifti, write_phantom_dataset,
                            write_vraw, write_volume)


class TestNifti:
    def test_minimal_constant_volume_normalizes_to_zero(self, tmp_path):
        path = str(tmp_path / "ones.nii")
        write_nifti(path, np.ones((2, 2, 2), dtype=np.float32))
        rec = read_volume(path)
        assert rec.volume.shape == (1, 2, 2, 2)
        npt.assert_array_equal(rec.volume, 0.0)  # constant-variance guard

    def test_round_trip_bit_exact(self, tmp_path):
        path = str(tmp_path / "v.nii")
        vol = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
        write_nifti(path, vol)
        npt.assert_array_equal(load_array(path), vol)

    def test_wrong_magic(self, tmp_path):
        path = str(tmp_path / "bad.nii")
        vol = np.ones((2, 2, 2), dtype=np.float32)
        write_nifti(path, vol)
        data = bytearray((tmp_path / "bad.nii").read_bytes())
        data[344:348] = b"xx1\x00"
        (tmp_path / "bad.nii").write_bytes(bytes(data))
        with pytest.raises(BadMagicError):
            load_array(path)

    def test_not_a_nifti_at_all(self, tmp_path):
        path = tmp_path / "junk.nii"
        path.write_bytes(b"\x00" * 400)
        with pytest.raises(BadMagicError):
            load_array(str(path))

    def test_unsupported_datatype(self, tmp_path):
        path = str(tmp_path / "f64.nii")
        write_nifti(path, np.ones((2, 2, 2), dtype=np.float32))
        data = bytearray((tmp_path / "f64.nii").read_bytes())
        data[70:72] = (64).to_bytes(2, "little")  # float64 code
        (tmp_path / "f64.nii").write_bytes(bytes(data))
        with pytest.raises(UnsupportedDatatypeError):
            load_array(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "short.nii"
        path.write_bytes(b"\x00" * 100)
        with pytest.raises(TruncatedFileError):
            load_array(str(path))

    def test_truncated_payload(self, tmp_path):
        path = str(tmp_path / "cut.nii")
        write_nifti(path, np.ones((4, 4, 4), dtype=np.float32))
        data = (tmp_path / "cut.nii").read_bytes()
        (tmp_path / "cut.nii").write_bytes(data[:-40])
        with pytest.raises(TruncatedFileError):
            load_array(path)

    def test_int16_payload(self, tmp_path):
        path = str(tmp_path / "i16.nii")
        write_nifti(path, np.ones((2, 2, 2), dtype=np.float32))
        data = bytearray((tmp_path / "i16.nii").read_bytes())
        data[70:72] = (4).to_bytes(2, "little")    # int16 code
        data[72:74] = (16).to_bytes(2, "little")   # bitpix
        payload = np.arange(8, dtype="<i2").tobytes()
        (tmp_path / "i16.nii").write_bytes(bytes(data[:352]) + payload)
        npt.assert_array_equal(load_array(path).ravel(), np.arange(8))

    def test_missing_file(self):
        with pytest.raises(FileNotFoundError):
            load_array("/nonexistent/volume.nii")


class TestVraw:
    def test_round_trip_bit_exact(self, tmp_path):
        path = str(tmp_path / "v.vraw")
        vol = np.random.default_rng(1).normal(size=(5, 3, 2)).astype(np.float32)
        write_vraw(path, vol)
        npt.assert_array_equal(load_array(path), vol)

    def test_f64_round_trip(self, tmp_path):
        path = str(tmp_path / "v.vraw")
        vol = np.random.default_rng(2).normal(size=(2, 2, 2))
        write_vraw(path, vol)
        out = load_array(path)
        assert out.dtype == np.float64
        npt.assert_array_equal(out, vol)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.vraw"
        path.write_bytes(b"WRAV" + b"\x00" * 32)
        with pytest.raises(BadMagicError):
            load_array(str(path))

    def test_bad_dtype_tag(self, tmp_path):
        path = tmp_path / "bad.vraw"
        import struct
        path.write_bytes(b"VRAW" + struct.pack("<4I", 1, 1, 1, 9) + b"\x00" * 8)
        with pytest.raises(UnsupportedDatatypeError):
            load_array(str(path))

    def test_truncated(self, tmp_path):
        path = str(tmp_path / "cut.vraw")
        write_vraw(path, np.ones((4, 4, 4), dtype=np.float32))
        data = (tmp_path / "cut.vraw").read_bytes()
        (tmp_path / "cut.vraw").write_bytes(data[:-8])
        with pytest.raises(TruncatedFileError):
            load_array(path)

    def test_write_volume_dispatches_on_extension(self, tmp_path):
        vol = np.random.default_rng(3).normal(size=(2, 3, 4)).astype(np.float32)
        for name in ("a.nii", "a.vraw"):
            path = str(tmp_path / name)
            write_volume(path, vol)
            npt.assert_array_equal(load_array(path), vol)


class TestNormalization:
    def test_zscore_statistics(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            vol = rng.normal(loc=3.0, scale=7.0, size=(6, 6, 6)).astype(np.float32)
            out = normalize_volume(vol)
            assert abs(out.mean(dtype=np.float64)) < 1e-6
            assert abs(out.var(dtype=np.float64) - 1.0) < 1e-4

    def test_read_volume_applies_normalization(self, tmp_path):
        path = str(tmp_path / "v.vraw")
        vol = np.random.default_rng(5).normal(size=(4, 4, 4)).astype(np.float32) * 9 + 4
        write_vraw(path, vol)
        rec = read_volume(path)
        assert abs(rec.volume.mean(dtype=np.float64)) < 1e-6


class TestPhantoms:
    def test_zero_noise_classes_differ_exactly_on_blobs(self):
        spec = PhantomSpec(grid=16, noise_std=0.0, seed=1)
        vols, labels, masks = generate_phantoms(spec, n_per_class=2)
        base = vols[labels == 0][0, 0]
        for i in np.nonzero(labels == 1)[0]:
            diff = vols[i, 0] != base
            npt.assert_array_equal(diff, masks[i])

    def test_same_seed_bit_identical(self):
        spec = PhantomSpec(grid=16, seed=9)
        a = generate_phantoms(spec, 3)
        b = generate_phantoms(spec, 3)
        assert a[0].tobytes() == b[0].tobytes()
        assert np.array_equal(a[2], b[2])

    def test_masks_nonempty_only_for_class_one(self):
        vols, labels, masks = generate_phantoms(PhantomSpec(grid=16, seed=2), 4)
        for i, label in enumerate(labels):
            assert masks[i].any() == bool(label)

    def test_blob_mean_rule_separates_zero_noise_perfectly(self):
        from volnet.metrics import auc
        spec = PhantomSpec(grid=16, noise_std=0.0, seed=3)
        vols, labels, masks = generate_phantoms(spec, 8)
        union = masks.any(axis=0)
        scores = vols[:, 0][:, union].mean(axis=1)
        # darkened blobs push class-1 means down: perfect ranking
        assert auc(-scores, labels) == 1.0

    def test_oversized_blob_rejected(self):
        with pytest.raises(ValueError):
            PhantomSpec(grid=8, radius_range=(3, 6))

    def test_long_range_variant_balanced_polarity(self):
        spec = PhantomSpec(grid=16, noise_std=0.0, seed=4, variant="long_range")
        vols, labels, masks = generate_phantoms(spec, 10)
        assert all(m.any() for m in masks)  # both classes carry structure

    def test_label_alternation(self):
        _, labels, _ = generate_phantoms(PhantomSpec(grid=16, seed=5), 3)
        npt.assert_array_equal(labels, [0, 1, 0, 1, 0, 1])

    def test_mask_bbox(self):
        m = np.zeros((4, 4, 4), dtype=bool)
        assert mask_bbox(m) is None
        m[1, 2, 3] = True
        m[2, 2, 3] = True
        lo, hi = mask_bbox(m)
        npt.assert_array_equal(lo, [1, 2, 3])
        npt.assert_array_equal(hi, [2, 2, 3])


class TestManifestAndSplit:
    def make_manifest(self, n_per_class=10):
        entries = []
        for i in range(2 * n_per_class):
            entries.append(ManifestEntry(f"vol_{i:03d}.vraw", i % 2))
        return DatasetManifest(entries=entries)

    def test_round_trip(self, tmp_path):
        manifest = self.make_manifest(3)
        manifest.task = "pmci_smci"
        path = str(tmp_path / "m.tsv")
        save_manifest(manifest, path)
        loaded = load_manifest(path)
        assert loaded.task == "pmci_smci"
        assert [(e.path, e.label, e.split) for e in loaded.entries] == \
               [(e.path, e.label, e.split) for e in manifest.entries]

    def test_exact_8_1_1_split(self):
        out = split_manifest(self.make_manifest(10), (0.8, 0.1, 0.1), seed=0)
        for label in (0, 1):
            rows = [e for e in out.entries if e.label == label]
            counts = {s: sum(e.split == s for e in rows)
                      for s in ("train", "val", "test")}
            assert counts == {"train": 8, "val": 1, "test": 1}

    def test_same_seed_same_split(self):
        a = split_manifest(self.make_manifest(10), (0.6, 0.2, 0.2), seed=5)
        b = split_manifest(self.make_manifest(10), (0.6, 0.2, 0.2), seed=5)
        assert [e.split for e in a.entries] == [e.split for e in b.entries]

    def test_union_is_everything_and_splits_disjoint(self):
        rng = np.random.default_rng(6)
        for trial in range(5):
            n = int(rng.integers(10, 40))
            manifest = self.make_manifest(n)
            out = split_manifest(manifest, (0.7, 0.15, 0.15), seed=trial)
            seen = {}
            for e in out.entries:
                assert e.path not in seen
                seen[e.path] = e.split
            assert len(seen) == 2 * n

    def test_too_small_class_errors(self):
        manifest = DatasetManifest(entries=[ManifestEntry("a", 0),
                                            ManifestEntry("b", 0),
                                            ManifestEntry("c", 1)])
        with pytest.raises(ValueError, match="stratify"):
            split_manifest(manifest, (0.5, 0.25, 0.25), seed=0)

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ValueError):
            split_manifest(self.make_manifest(5), (0.5, 0.2, 0.2), seed=0)

    def test_written_dataset_loads_from_anywhere(self, tmp_path):
        spec = PhantomSpec(grid=8, seed=7, radius_range=(2, 3))
        manifest_path = write_phantom_dataset(spec, 3, str(tmp_path / "ds"),
                                              fractions=(0.7, 0.0, 0.3))
        manifest = load_manifest(manifest_path)
        from volnet.data_io import load_split
        x, y = load_split(manifest, "train")
        assert x.shape[1:] == (1, 8, 8, 8)
        assert set(y.tolist()) == {0, 1}

    def test_unknown_split_rejected(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("a.vraw\t0\tholdout\n")
        with pytest.raises(ValueError, match="holdout"):
            load_manifest(str(path))
