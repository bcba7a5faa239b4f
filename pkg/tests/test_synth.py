import numpy as np
import pytest

from partscene.assets import build_demo_shape, write_demo_library
from partscene.geometry import AABB
from partscene.io import write_obj_with_sidecar
from partscene.synth import (Layout, LayoutPlacement, QuerySpec, SceneManifest,
                             SynthError, assign_split, derive_queries,
                             generate_scene, load_layouts, load_scene,
                             load_shape_library, save_scene,
                             synthesize_from_manifest)
from partscene.util import dump_json

from conftest import TEST_TIERS


class TestLoadShapeLibrary:
    def test_loads_all_valid_shapes(self, library_dir, library):
        assert len(library) == 20
        rec = library["table_00"]
        assert rec.category == "table" and rec.size_tier == "large"
        assert rec.part_labels

    def test_invalid_shape_reported_not_dropped_silently(self, tmp_path):
        write_demo_library(tmp_path, seed=0, variants=1)
        mesh, labels, _, _ = build_demo_shape("mug", 3)
        write_obj_with_sidecar(mesh, labels, tmp_path / "broken.obj",
                               extra_meta={"shape_id": "broken",
                                           "category": "mug",
                                           "size_tier": "small"})
        # corrupt the sidecar: face range exceeding the face count
        import json
        sidecar = tmp_path / "broken.json"
        meta = json.loads(sidecar.read_text())
        meta["face_ranges"][0]["end"] = 10_000
        dump_json(meta, sidecar)
        lib, report = load_shape_library(tmp_path)
        assert "broken" not in lib
        assert any("broken.obj" in path for path, _ in report.rejected)
        assert len(lib) == 10

    def test_empty_directory_rejected(self, tmp_path):
        with pytest.raises(SynthError, match="no shapes"):
            load_shape_library(tmp_path)

    def test_duplicate_shape_id_rejected(self, tmp_path):
        mesh, labels, _, _ = build_demo_shape("mug", 1)
        for name in ("a", "b"):
            write_obj_with_sidecar(mesh, labels, tmp_path / f"{name}.obj",
                                   extra_meta={"shape_id": "same",
                                               "category": "mug",
                                               "size_tier": "small"})
        with pytest.raises(SynthError, match="duplicate"):
            load_shape_library(tmp_path)


def single_table_layout():
    return Layout(
        layout_id="one_table",
        room_extent=AABB(np.zeros(3), np.array([4.0, 3.0, 2.5])),
        placements=[LayoutPlacement("table", np.array([2.0, 1.5, 0.0]), 0.0)])


class TestGenerateScene:
    def test_minimal_scene(self, library):
        manifest, mesh, cloud = generate_scene(
            single_table_layout(), library, seed=1, small_object_count=0,
            tier_points=TEST_TIERS)
        assert len(manifest.placed_shapes) == 1
        assert len(cloud) == TEST_TIERS["large"]
        assert mesh.num_faces > 0

    def test_seed_sensitivity(self, library):
        m7, _, _ = generate_scene(single_table_layout(), library, seed=7,
                                  small_object_count=2, tier_points=TEST_TIERS)
        m8, _, _ = generate_scene(single_table_layout(), library, seed=8,
                                  small_object_count=2, tier_points=TEST_TIERS)
        assert m7.to_dict() != m8.to_dict()

    def test_part_ids_partition_the_cloud(self, desk_scene):
        cloud = desk_scene.cloud
        assert set(np.unique(cloud.part_id)) == set(desk_scene.manifest.label_table)
        assert (cloud.part_id > 0).all()

    def test_determinism_and_manifest_replay(self, library, layouts):
        lay = layouts["desk_a"]
        m1, mesh1, cloud1 = generate_scene(lay, library, seed=4,
                                           small_object_count=3,
                                           tier_points=TEST_TIERS)
        m2, mesh2, cloud2 = generate_scene(lay, library, seed=4,
                                           small_object_count=3,
                                           tier_points=TEST_TIERS)
        assert m1.to_dict() == m2.to_dict()
        assert np.array_equal(cloud1.points, cloud2.points)
        assert np.array_equal(mesh1.vertices, mesh2.vertices)
        mesh3, cloud3 = synthesize_from_manifest(m1, library)
        assert np.array_equal(cloud1.points, cloud3.points)
        assert np.array_equal(cloud1.colors, cloud3.colors)
        assert np.array_equal(cloud1.part_id, cloud3.part_id)
        assert np.array_equal(mesh1.vertices, mesh3.vertices)

    def test_missing_required_category_names_it(self, library):
        layout = Layout(
            layout_id="bad",
            room_extent=AABB(np.zeros(3), np.array([4.0, 3.0, 2.5])),
            placements=[LayoutPlacement("sofa", np.array([2.0, 1.5, 0.0]), 0.0)])
        with pytest.raises(SynthError, match="sofa"):
            generate_scene(layout, library, seed=0, tier_points=TEST_TIERS)

    def test_overlapping_required_placements_rejected(self, library):
        layout = Layout(
            layout_id="collide",
            room_extent=AABB(np.zeros(3), np.array([4.0, 3.0, 2.5])),
            placements=[
                LayoutPlacement("table", np.array([2.0, 1.5, 0.0]), 0.0),
                LayoutPlacement("table", np.array([2.1, 1.5, 0.0]), 0.0),
            ])
        with pytest.raises(SynthError, match="overlap"):
            generate_scene(layout, library, seed=0, small_object_count=0,
                           tier_points=TEST_TIERS)

    def test_required_aabbs_disjoint(self, library, layouts, scene_factory):
        scene = scene_factory("living", seed=3)
        from partscene.synth import _transformed_mesh
        boxes = [_transformed_mesh(library, p).aabb()
                 for p in scene.manifest.placed_shapes]
        # all placed objects end up pairwise non-overlapping, required or not
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                assert boxes[i].overlap_volume(boxes[j]) == 0.0

    def test_global_ids_unique_across_objects(self, desk_scene):
        manifest = desk_scene.manifest
        oids = [p.object_id for p in manifest.placed_shapes]
        assert len(set(oids)) == len(oids)
        all_parts = [g for p in manifest.placed_shapes
                     for g in p.part_id_map.values()]
        assert len(set(all_parts)) == len(all_parts)


class TestDeriveQueries:
    def test_direct_query_counts_instances(self, library):
        layout = Layout(
            layout_id="four_chairs",
            room_extent=AABB(np.zeros(3), np.array([8.0, 8.0, 2.5])),
            placements=[
                LayoutPlacement("chair", np.array([x, y, 0.0]), 0.0)
                for x, y in ((2.0, 2.0), (6.0, 2.0), (2.0, 6.0), (6.0, 6.0))])
        manifest, _, _ = generate_scene(layout, library, seed=0,
                                        small_object_count=0,
                                        tier_points=TEST_TIERS)
        legs = [q for q in manifest.queries if q.query_text == "chair_leg"]
        assert len(legs) == 1
        assert len(legs[0].gt_part_ids) == 16

    def test_implicit_template_applied(self, library, layouts):
        manifest, _, _ = generate_scene(
            layouts["living"], library, seed=1, small_object_count=0,
            tier_points=TEST_TIERS,
            implicit_templates={"door_handle": "open the door"})
        implicit = [q for q in manifest.queries if q.kind == "implicit"]
        assert len(implicit) == 1
        assert implicit[0].query_text == "open the door"
        direct = {q.query_text: q for q in manifest.queries if q.kind == "direct"}
        assert implicit[0].gt_part_ids == direct["door_handle"].gt_part_ids

    def test_template_for_absent_label_skipped(self, library):
        manifest, _, _ = generate_scene(
            single_table_layout(), library, seed=0, small_object_count=0,
            tier_points=TEST_TIERS,
            implicit_templates={"door_handle": "open the door"})
        assert all(q.kind == "direct" for q in manifest.queries)

    def test_query_soundness(self, desk_scene):
        manifest = desk_scene.manifest
        for q in manifest.queries:
            if q.kind != "direct":
                continue
            for pid in q.gt_part_ids:
                assert manifest.label_table[pid] == q.query_text


class TestAssignSplit:
    @pytest.mark.parametrize("total,expected", [
        (10000, (9000, 500, 500)),
        (20, (18, 1, 1)),
        (1, (1, 0, 0)),
    ])
    def test_split_sizes(self, total, expected):
        splits = [assign_split(i, total) for i in range(total)]
        assert (splits.count("train"), splits.count("val"),
                splits.count("test")) == expected

    def test_split_is_shuffled_but_deterministic(self):
        a = [assign_split(i, 100, shuffle_seed=1) for i in range(100)]
        b = [assign_split(i, 100, shuffle_seed=1) for i in range(100)]
        assert a == b
        # a seeded shuffle should not leave the first 90 all train
        assert set(a[:90]) != {"train"}

    def test_out_of_range_rejected(self):
        with pytest.raises(SynthError):
            assign_split(5, 5)


def test_scene_save_load_round_trip(tmp_path, desk_scene):
    d = save_scene(tmp_path / "scene", desk_scene.manifest, desk_scene.mesh,
                   desk_scene.cloud)
    loaded = load_scene(d)
    assert loaded.manifest.to_dict() == desk_scene.manifest.to_dict()
    assert len(loaded.cloud) == len(desk_scene.cloud)
    assert np.allclose(loaded.cloud.points, desk_scene.cloud.points, atol=1e-5)
    assert np.array_equal(loaded.cloud.part_id, desk_scene.cloud.part_id)
    assert loaded.mesh.num_faces == desk_scene.mesh.num_faces


def test_scene_resynthesis_from_disk_manifest(tmp_path, desk_scene, library):
    d = save_scene(tmp_path / "scene", desk_scene.manifest, desk_scene.mesh,
                   desk_scene.cloud)
    replayed = load_scene(d, library=library, resynthesize=True)
    assert np.array_equal(replayed.cloud.points, desk_scene.cloud.points)


def test_layout_validation():
    with pytest.raises(SynthError, match="outside"):
        Layout(layout_id="x",
               room_extent=AABB(np.zeros(3), np.array([2.0, 2.0, 2.0])),
               placements=[LayoutPlacement("table", np.array([5.0, 1.0, 0.0]), 0.0)])


def test_repo_layouts_all_load(layouts):
    assert len(layouts) >= 8
    for lay in layouts.values():
        assert lay.placements
