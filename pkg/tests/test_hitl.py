import json

import numpy as np
import pytest

from mammoforge.errors import StateError, ValidationError
from mammoforge.evaluation import dice
from mammoforge.hitl import (
    CaseStore,
    SplitAssignment,
    compute_edit_stats,
    mask_hash,
)
from mammoforge.manifest import CaseManifest
from mammoforge.nifti import read_nifti, write_nifti
from mammoforge.volume import GridMeta, LabelVolume

from conftest import make_image, make_labels


def seed_case(store: CaseStore, case_id: str, rng, dims=(8, 8, 8)):
    case_dir = store.case_dir(case_id)
    case_dir.mkdir(parents=True, exist_ok=True)
    img = make_image(rng.random(dims).astype(np.float32))
    write_nifti(img, case_dir / "t1w.nii")
    write_nifti(img, case_dir / "dce.nii")
    manifest = CaseManifest(case_id=case_id,
                            sequences={"t1w": "t1w.nii", "dce": "dce.nii"})
    manifest.save(case_dir / "manifest.json")
    return img


def auto_mask(img, blob=((2, 5), (2, 5), (2, 5)), label=1):
    arr = np.zeros(img.meta.dims, dtype=np.uint8)
    (x0, x1), (y0, y1), (z0, z1) = blob
    arr[x0:x1, y0:y1, z0:z1] = label
    return LabelVolume(img.meta, arr)


class TestRecordsAndStages:
    def test_record_roundtrip(self, tmp_path, rng):
        store = CaseStore(tmp_path)
        seed_case(store, "c1", rng)
        record = store.load_record("c1")
        assert record.stage == "ingested"
        store.advance_stage("c1", "preprocessed")
        assert store.load_record("c1").stage == "preprocessed"

    def test_backward_transition_rejected(self, tmp_path, rng):
        store = CaseStore(tmp_path)
        seed_case(store, "c1", rng)
        store.advance_stage("c1", "auto_segmented")
        with pytest.raises(StateError, match="backward"):
            store.advance_stage("c1", "preprocessed")

    def test_forward_jump_allowed(self, tmp_path, rng):
        store = CaseStore(tmp_path)
        seed_case(store, "c1", rng)
        store.advance_stage("c1", "final")
        assert store.load_record("c1").stage == "final"


class TestMasksAndProvenance:
    def test_set_mask_creates_chained_events(self, tmp_path, rng):
        store = CaseStore(tmp_path)
        img = seed_case(store, "c1", rng)
        store.set_mask("c1", auto_mask(img), "pipeline", "auto_segment")
        store.set_mask("c1", auto_mask(img, ((1, 6), (1, 6), (1, 6))),
                       "pipeline", "auto_segment")
        events = store.provenance("c1")
        assert len(events) == 2
        assert events[0].mask_hash_before is None
        assert events[1].mask_hash_before == events[0].mask_hash_after
        assert store.validate_provenance("c1")

    def test_export_for_revision(self, tmp_path, rng):
        store = CaseStore(tmp_path)
        img = seed_case(store, "c1", rng)
        store.set_mask("c1", auto_mask(img), "pipeline", "auto_segment")
        img_out, mask_out = store.export_for_revision("c1", tmp_path / "out")
        assert img_out.name == "c1_img.nii"
        assert mask_out.name == "c1_mask.nii"
        exported = read_nifti(mask_out)
        assert np.array_equal(exported.labels, store.current_mask("c1").labels)
        assert mask_hash(mask_out) == store.provenance("c1")[-1].mask_hash_after
        assert store.validate_provenance("c1")

    def test_export_without_mask_raises(self, tmp_path, rng):
        store = CaseStore(tmp_path)
        seed_case(store, "c1", rng)
        with pytest.raises(StateError, match="no anatomy mask"):
            store.export_for_revision("c1", tmp_path / "out")

    def test_ingest_revision_overwrites_and_counts(self, tmp_path, rng):
        store = CaseStore(tmp_path)
        img = seed_case(store, "c1", rng)
        store.set_mask("c1", auto_mask(img), "pipeline", "auto_segment")
        store.advance_stage("c1", "auto_segmented")

        revised_arr = auto_mask(img).labels.copy()
        revised_arr[6, 6, 6] = 1  # human adds one voxel
        revised = LabelVolume(img.meta, revised_arr)
        rev_path = tmp_path / "revised.nii"
        write_nifti(revised, rev_path)

        stats = store.ingest_revision("c1", rev_path)
        assert stats.voxels_added == 1
        assert stats.voxels_removed == 0
        assert np.array_equal(store.current_mask("c1").labels, revised_arr)
        assert store.load_record("c1").stage == "revised"
        assert store.validate_provenance("c1")

    def test_ingest_identical_mask_zero_stats(self, tmp_path, rng):
        store = CaseStore(tmp_path)
        img = seed_case(store, "c1", rng)
        mask = auto_mask(img)
        store.set_mask("c1", mask, "pipeline", "auto_segment")
        rev_path = tmp_path / "same.nii"
        write_nifti(mask, rev_path)
        stats = store.ingest_revision("c1", rev_path)
        assert stats.voxels_added == 0
        assert stats.voxels_removed == 0
        assert stats.dice_before_after == 1.0

    def test_ingest_ten_voxel_blob(self, tmp_path, rng):
        store = CaseStore(tmp_path)
        img = seed_case(store, "c1", rng, dims=(10, 10, 10))
        base = auto_mask(img, ((2, 4), (2, 4), (2, 4)))
        store.set_mask("c1", base, "pipeline", "auto_segment")
        revised_arr = base.labels.copy()
        revised_arr[7, 7, 0:10] = 1  # 10-voxel column added
        rev_path = tmp_path / "blob.nii"
        write_nifti(LabelVolume(img.meta, revised_arr), rev_path)
        stats = store.ingest_revision("c1", rev_path)
        assert stats.voxels_added == 10
        assert stats.voxels_removed == 0

    def test_ingest_bad_geometry_leaves_store_untouched(self, tmp_path, rng):
        store = CaseStore(tmp_path)
        img = seed_case(store, "c1", rng)
        store.set_mask("c1", auto_mask(img), "pipeline", "auto_segment")
        before_events = store.provenance("c1")
        before_hash = mask_hash(store.mask_path("c1"))

        wrong = LabelVolume(GridMeta((4, 4, 4)),
                            np.ones((4, 4, 4), dtype=np.uint8))
        rev_path = tmp_path / "wrong.nii"
        write_nifti(wrong, rev_path)
        with pytest.raises(ValidationError, match="geometry"):
            store.ingest_revision("c1", rev_path)
        assert mask_hash(store.mask_path("c1")) == before_hash
        assert store.provenance("c1") == before_events
        assert store.validate_provenance("c1")

    def test_ingest_failure_injected_mid_write(self, tmp_path, rng, monkeypatch):
        store = CaseStore(tmp_path)
        img = seed_case(store, "c1", rng)
        store.set_mask("c1", auto_mask(img), "pipeline", "auto_segment")
        before_hash = mask_hash(store.mask_path("c1"))
        before_events = store.provenance("c1")

        revised = auto_mask(img, ((1, 7), (1, 7), (1, 7)))
        rev_path = tmp_path / "rev.nii"
        write_nifti(revised, rev_path)

        import mammoforge.hitl as hitl_mod
        def exploding_write(volume, path):
            raise OSError("disk full (injected)")
        monkeypatch.setattr(hitl_mod, "write_nifti", exploding_write)
        with pytest.raises(OSError, match="injected"):
            store.ingest_revision("c1", rev_path)
        monkeypatch.undo()

        assert mask_hash(store.mask_path("c1")) == before_hash
        assert store.provenance("c1") == before_events
        assert store.validate_provenance("c1")

    def test_archive_keeps_prior_mask(self, tmp_path, rng):
        store = CaseStore(tmp_path)
        img = seed_case(store, "c1", rng)
        original = auto_mask(img)
        store.set_mask("c1", original, "pipeline", "auto_segment")
        revised = auto_mask(img, ((0, 3), (0, 3), (0, 3)))
        rev_path = tmp_path / "rev.nii"
        write_nifti(revised, rev_path)
        store.ingest_revision("c1", rev_path, archive=True)
        archived = list((store.case_dir("c1") / "archive").glob("*.nii"))
        assert len(archived) == 1
        assert np.array_equal(read_nifti(archived[0]).labels, original.labels)

    def test_dice_matches_evaluation_module(self, tmp_path, rng):
        store = CaseStore(tmp_path)
        img = seed_case(store, "c1", rng)
        a = auto_mask(img, ((2, 6), (2, 6), (2, 6)))
        b = auto_mask(img, ((3, 7), (3, 7), (3, 7)))
        store.set_mask("c1", a, "pipeline", "auto_segment")
        rev_path = tmp_path / "rev.nii"
        write_nifti(b, rev_path)
        stats = store.ingest_revision("c1", rev_path)
        assert stats.dice_before_after == dice(a, b, 1)

    def test_lesion_channel_independent(self, tmp_path, rng):
        store = CaseStore(tmp_path)
        img = seed_case(store, "c1", rng)
        store.set_mask("c1", auto_mask(img, label=1), "pipeline",
                       "auto_segment", channel="anatomy")
        store.set_mask("c1", auto_mask(img, label=3), "pipeline",
                       "auto_segment", channel="lesion")
        assert store.validate_provenance("c1", "anatomy")
        assert store.validate_provenance("c1", "lesion")
        assert store.current_mask("c1", "lesion").label_set() == {0, 3}


class TestSplit:
    def _store_with_cases(self, tmp_path, n):
        store = CaseStore(tmp_path)
        for i in range(n):
            case_dir = store.case_dir(f"case{i:03d}")
            case_dir.mkdir(parents=True)
            CaseManifest(case_id=f"case{i:03d}").save(case_dir / "manifest.json")
            store.save_record(f"case{i:03d}",
                              store.load_record(f"case{i:03d}"))
            store.advance_stage(f"case{i:03d}", "revised")
        return store

    def test_120_cases_split_90_30(self, tmp_path):
        store = self._store_with_cases(tmp_path, 120)
        assignment = store.split_dataset(0.75, seed=7)
        assert len(assignment.train) == 90
        assert len(assignment.test) == 30

    def test_4_cases_rounding(self, tmp_path):
        store = self._store_with_cases(tmp_path, 4)
        assignment = store.split_dataset(0.75, seed=7)
        assert len(assignment.train) == 3
        assert len(assignment.test) == 1

    def test_same_seed_reproduces(self, tmp_path):
        a = self._store_with_cases(tmp_path / "a", 20)
        b = self._store_with_cases(tmp_path / "b", 20)
        sa = a.split_dataset(0.75, seed=42)
        sb = b.split_dataset(0.75, seed=42)
        assert sa.train == sb.train
        assert sa.test == sb.test

    def test_partition_property(self, tmp_path):
        store = self._store_with_cases(tmp_path, 17)
        assignment = store.split_dataset(0.6, seed=3)
        train, test = set(assignment.train), set(assignment.test)
        assert train.isdisjoint(test)
        assert train | test == set(store.case_ids())

    def test_already_assigned_needs_reassign(self, tmp_path):
        store = self._store_with_cases(tmp_path, 8)
        first = store.split_dataset(0.75, seed=1)
        # identical parameters: idempotent no-op
        again = store.split_dataset(0.75, seed=1)
        assert again == first
        # different parameters without the flag: rejected
        with pytest.raises(ValidationError, match="reassign"):
            store.split_dataset(0.75, seed=2)
        assignment = store.split_dataset(0.5, seed=2, reassign=True)
        assert len(assignment.train) == 4

    def test_unrevised_cases_rejected(self, tmp_path, rng):
        store = CaseStore(tmp_path)
        seed_case(store, "c1", rng)
        with pytest.raises(ValidationError, match="revised"):
            store.split_dataset(0.75, seed=1)

    def test_split_file_schema(self, tmp_path):
        store = self._store_with_cases(tmp_path, 10)
        store.split_dataset(0.75, seed=9)
        data = json.loads((store.root / "split.json").read_text())
        assert set(data) == {"seed", "train", "test"}
        back = SplitAssignment.load(store.root / "split.json")
        assert back.seed == 9

    def test_records_updated(self, tmp_path):
        store = self._store_with_cases(tmp_path, 10)
        assignment = store.split_dataset(0.75, seed=9)
        for cid in assignment.train:
            assert store.load_record(cid).split == "train"
        for cid in assignment.test:
            assert store.load_record(cid).split == "test"


def test_edit_stats_per_label():
    meta = GridMeta((6, 6, 6))
    old = np.zeros((6, 6, 6), dtype=np.uint8)
    new = np.zeros((6, 6, 6), dtype=np.uint8)
    old[0:2, 0, 0] = 1
    new[0:1, 0, 0] = 1   # one label-1 voxel removed
    new[3:6, 0, 0] = 2   # three label-2 voxels added
    stats = compute_edit_stats(LabelVolume(meta, old), LabelVolume(meta, new))
    assert stats.per_label[1] == {"added": 0, "removed": 1}
    assert stats.per_label[2] == {"added": 3, "removed": 0}
    assert stats.voxels_added == 3
    assert stats.voxels_removed == 1
