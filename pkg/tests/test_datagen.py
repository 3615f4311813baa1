"""Generators, proposal simulator, location encoding, container format."""

import numpy as np
import pytest

from alforge import datagen as dg
from alforge.rng import RngStream
from alforge.tensorio import FormatError, read_tensor, write_tensor


class TestLocationEncoding:
    def test_half(self):
        gt = dg.LocationGroundTruth(np.array([2.0, 5.0, 1.0, 10.0]),
                                    np.array([4.0, 10.0, 4.0, 80.0]))
        enc = dg.encode_location(gt)
        assert enc[0] == 0.5

    def test_at_caps(self):
        caps = np.array([4.0, 10.0, 4.0, 80.0])
        assert np.array_equal(dg.encode_location(dg.LocationGroundTruth(caps, caps)),
                              np.ones(4))

    def test_roundtrip(self):
        s = RngStream(1)
        caps = np.array([4.0, 10.0, 4.0, 80.0])
        raw = s.uniform(size=4, low=0.01) * caps
        enc = dg.encode_location(dg.LocationGroundTruth(raw, caps))
        assert np.abs(dg.decode_location(enc, caps) - raw).max() < 1e-12
        assert (enc > 0).all() and (enc <= 1).all()

    def test_over_cap_rejected(self):
        with pytest.raises(ValueError):
            dg.encode_location(dg.LocationGroundTruth(np.array([5.0, 1, 1, 1]),
                                                      np.array([4.0, 10, 4, 80])))


class TestLargestRemainder:
    def test_kitti_1000(self):
        counts = dg.largest_remainder_counts(dg.KITTI_FRACTIONS, 1000)
        assert counts.tolist() == [780, 156, 27, 13, 24]

    def test_always_sums(self):
        for n in (7, 53, 999, 4000):
            assert dg.largest_remainder_counts(dg.KITTI_FRACTIONS, n).sum() == n

    def test_kitti_fractions_sum_to_one(self):
        assert abs(sum(dg.KITTI_FRACTIONS) - 1.0) < 1e-12


class TestClusterDataset:
    def test_kitti_counts(self):
        train, test = dg.gen_cluster_dataset(dg.ClassProfile.kitti(), 1000, 500, 4,
                                             3.0, RngStream(1))
        assert train.class_counts().tolist() == [780, 156, 27, 13, 24]
        assert len(test) == 500

    def test_deterministic(self):
        a, _ = dg.gen_cluster_dataset(dg.ClassProfile.kitti(), 100, 50, 4, 3.0,
                                      RngStream(2))
        b, _ = dg.gen_cluster_dataset(dg.ClassProfile.kitti(), 100, 50, 4, 3.0,
                                      RngStream(2))
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.locations, b.locations)

    def test_zero_separation_majority_oracle(self):
        # coincident clusters carry no class signal: a trained model cannot
        # beat the majority-class rate by much
        from alforge import net
        train, test = dg.gen_cluster_dataset(dg.ClassProfile.kitti(), 400, 400, 4,
                                             0.0, RngStream(3))
        # strong decay so the fit converges to the class prior instead of
        # memorizing noise
        cfg = net.desk_dense_config(4, num_classes=5, epochs=30, fc_widths=(8,),
                                    dropout_rate=0.0, weight_decay=0.05,
                                    learning_rate=0.01)
        model, _ = net.train(train.features, train.labels, train.locations,
                             train.loc_mask, cfg, RngStream(4))
        pred = net.forward(model, test.features).class_probs.argmax(axis=1)
        acc = np.mean(pred == test.labels)
        assert abs(acc - max(dg.KITTI_FRACTIONS)) < 0.08

    def test_locations_encoded_range(self):
        train, _ = dg.gen_cluster_dataset(dg.ClassProfile.balanced(3), 60, 30, 4,
                                          2.0, RngStream(5))
        assert (train.locations > 0).all() and (train.locations <= 1).all()


class TestPatchDataset:
    def test_sparsity_matches_zero_fill(self):
        ds = dg.gen_patch_dataset(dg.ClassProfile.balanced(3), 10, 60, RngStream(6),
                                  zero_fill=0.8)
        sparsity = np.mean(ds.features == 0.0)
        assert abs(sparsity - 0.8) < 0.02

    def test_two_channels(self):
        ds = dg.gen_patch_dataset(dg.ClassProfile.balanced(2), 8, 10, RngStream(7))
        assert ds.features.shape[1] == 2

    def test_deterministic(self):
        a = dg.gen_patch_dataset(dg.ClassProfile.balanced(2), 8, 10, RngStream(8))
        b = dg.gen_patch_dataset(dg.ClassProfile.balanced(2), 8, 10, RngStream(8))
        assert np.array_equal(a.features, b.features)

    def test_too_small_patch(self):
        with pytest.raises(ValueError):
            dg.gen_patch_dataset(dg.ClassProfile.balanced(2), 4, 10, RngStream(9))


class TestProposalSimulator:
    def make_source(self, n=1000, seed=1):
        profile = dg.ClassProfile(("Small Vehicle", "Human"), (0.7, 0.3))
        train, _ = dg.gen_cluster_dataset(profile, n, 10, 4, 3.0, RngStream(seed))
        return train

    def test_perfect_recall_no_background(self):
        src = self.make_source()
        pp = dg.ProposalProfile(recall=(1.0, 1.0), background_fraction=0.0)
        pool, report = dg.simulate_proposals(src, pp, RngStream(2))
        assert len(pool) == len(src)
        assert np.array_equal(pool.features, src.features)
        assert report.dropped_indices.size == 0

    def test_surviving_fractions_near_recall(self):
        profile = dg.ClassProfile(("Small Vehicle", "Human"), (0.5, 0.5))
        src, _ = dg.gen_cluster_dataset(profile, 20_000, 10, 4, 3.0, RngStream(3))
        pool, report = dg.simulate_proposals(src, dg.ProposalProfile.kitti(),
                                             RngStream(4))
        frac = report.surviving_class_counts / src.class_counts()
        assert abs(frac[0] - 0.917) < 0.01
        assert abs(frac[1] - 0.862) < 0.01

    def test_background_has_zero_loc_mask(self):
        src = self.make_source()
        pool, _ = dg.simulate_proposals(src, dg.ProposalProfile.kitti(), RngStream(5))
        bg = pool.labels == pool.num_classes - 1
        assert bg.any()
        assert np.all(pool.loc_mask[bg] == 0)
        assert np.all(pool.extras["iou"][bg] < 0.2)
        assert np.all(pool.extras["iou"][~bg] > 0.5)

    def test_survivors_keep_ground_truth(self):
        src = self.make_source()
        pp = dg.ProposalProfile(recall=(0.9, 0.9), background_fraction=0.0)
        pool, report = dg.simulate_proposals(src, pp, RngStream(6))
        kept = np.setdiff1d(np.arange(len(src)), report.dropped_indices)
        assert np.array_equal(pool.labels, src.labels[kept])
        assert np.array_equal(pool.locations, src.locations[kept])

    def test_midband_only_in_test_split(self):
        src = self.make_source()
        pp = dg.ProposalProfile.kitti()
        _, r_train = dg.simulate_proposals(src, pp, RngStream(7))
        test_pool, r_test = dg.simulate_proposals(src, pp, RngStream(7), test_band=True)
        assert r_train.midband_count == 0 and r_test.midband_count > 0
        iou = test_pool.extras["iou"]
        mid = (iou > 0.2) & (iou < 0.5)
        assert mid.sum() == r_test.midband_count


class TestTensorFormat:
    def test_roundtrip_f64(self, tmp_path):
        arr = RngStream(1).normal(size=(3, 4, 2))
        p = tmp_path / "t.bin"
        write_tensor(p, arr)
        assert np.array_equal(read_tensor(p), arr)

    def test_roundtrip_i32(self, tmp_path):
        arr = np.arange(12, dtype=np.int32).reshape(3, 4)
        p = tmp_path / "t.bin"
        write_tensor(p, arr)
        out = read_tensor(p)
        assert out.dtype == np.int32 and np.array_equal(out, arr)

    def test_corrupt_magic_offset_zero(self, tmp_path):
        p = tmp_path / "t.bin"
        write_tensor(p, np.zeros(3))
        data = bytearray(p.read_bytes())
        data[0] ^= 0xFF
        p.write_bytes(bytes(data))
        with pytest.raises(FormatError) as e:
            read_tensor(p)
        assert e.value.offset == 0

    def test_truncation_names_offset(self, tmp_path):
        p = tmp_path / "t.bin"
        write_tensor(p, np.zeros(10))
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(FormatError) as e:
            read_tensor(p)
        assert "truncated" in str(e.value)

    def test_bad_dtype_code(self, tmp_path):
        p = tmp_path / "t.bin"
        write_tensor(p, np.zeros(2))
        data = bytearray(p.read_bytes())
        data[8] = 0x7F
        p.write_bytes(bytes(data))
        with pytest.raises(FormatError) as e:
            read_tensor(p)
        assert e.value.offset == 8


class TestDatasetContainer:
    def test_roundtrip_bitwise(self, tmp_path):
        train, _ = dg.gen_cluster_dataset(dg.ClassProfile.kitti(), 50, 10, 4, 3.0,
                                          RngStream(1))
        dg.dataset_write(tmp_path / "ds", train)
        back = dg.dataset_read(tmp_path / "ds")
        assert np.array_equal(back.features, train.features)
        assert np.array_equal(back.labels, train.labels)
        assert np.array_equal(back.locations, train.locations)
        assert np.array_equal(back.loc_mask, train.loc_mask)
        assert back.class_names == train.class_names

    def test_roundtrip_with_extras(self, tmp_path):
        src, _ = dg.gen_cluster_dataset(dg.ClassProfile(("a", "b"), (0.5, 0.5)),
                                        100, 10, 4, 3.0, RngStream(2))
        pool, _ = dg.simulate_proposals(src, dg.ProposalProfile(recall=(0.9, 0.9)),
                                        RngStream(3))
        dg.dataset_write(tmp_path / "ds", pool)
        back = dg.dataset_read(tmp_path / "ds")
        assert np.array_equal(back.extras["iou"], pool.extras["iou"])

    def test_empty_dataset_roundtrip(self, tmp_path):
        empty = dg.Dataset(np.zeros((0, 4)), np.zeros(0, dtype=np.int32),
                           np.zeros((0, 4)), np.zeros(0, dtype=np.int32),
                           ("a", "b"), np.ones(4))
        dg.dataset_write(tmp_path / "ds", empty)
        back = dg.dataset_read(tmp_path / "ds")
        assert len(back) == 0 and back.features.shape == (0, 4)

    def test_identical_containers_bitwise(self, tmp_path):
        for name in ("x", "y"):
            ds, _ = dg.gen_cluster_dataset(dg.ClassProfile.kitti(), 40, 10, 4, 3.0,
                                           RngStream(9))
            dg.dataset_write(tmp_path / name, ds)
        for f in ("manifest", "features.bin", "labels.bin", "locations.bin",
                  "locmask.bin"):
            assert (tmp_path / "x" / f).read_bytes() == (tmp_path / "y" / f).read_bytes()
