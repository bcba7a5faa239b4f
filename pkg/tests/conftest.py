import logging

import numpy as np
import pytest

from partscene.assets import write_demo_library
from partscene.grouping import PipelineSettings, ScenePipeline
from partscene.segmenter import SegmenterBackend
from partscene.synth import SceneData, generate_scene, load_layouts, load_shape_library
from partscene.util import load_json

logging.getLogger("partscene").setLevel(logging.ERROR)

# desk-scale tier counts: full-size tiers scaled by 1/8 keep scenes under
# 200k points at the spec's tier ratios
TEST_TIERS = {"large": 12800, "medium": 6400, "small": 3200}
TEST_RESOLUTION = (512, 512)


@pytest.fixture(scope="session")
def library_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("shapes")
    write_demo_library(root, seed=0, variants=2)
    return root


@pytest.fixture(scope="session")
def library(library_dir):
    lib, _ = load_shape_library(library_dir)
    return lib


@pytest.fixture(scope="session")
def layouts():
    return {lay.layout_id: lay for lay in load_layouts("layouts")}


@pytest.fixture(scope="session")
def implicit_templates():
    return load_json("layouts/implicit_templates.json")


@pytest.fixture(scope="session")
def scene_factory(library, layouts, implicit_templates):
    cache: dict = {}

    def make(layout_id="desk_a", seed=2, small_object_count=4,
             tier_points=None) -> SceneData:
        key = (layout_id, seed, small_object_count,
               tuple(sorted((tier_points or TEST_TIERS).items())))
        if key not in cache:
            manifest, mesh, cloud = generate_scene(
                layouts[layout_id], library, seed=seed,
                small_object_count=small_object_count,
                tier_points=dict(tier_points or TEST_TIERS),
                implicit_templates=implicit_templates)
            cache[key] = SceneData(manifest=manifest, mesh=mesh, cloud=cloud)
        return cache[key]

    return make


@pytest.fixture(scope="session")
def desk_scene(scene_factory) -> SceneData:
    return scene_factory("desk_a", seed=2)


@pytest.fixture(scope="session")
def desk_pipeline(desk_scene) -> ScenePipeline:
    """Shared fully-warmed pipeline; tests must not mutate its caches."""
    pipe = ScenePipeline(desk_scene, PipelineSettings(resolution=TEST_RESOLUTION),
                         SegmenterBackend(kind="oracle"))
    pipe.views  # warm the render cache eagerly so timing tests stay honest
    return pipe


def make_plane_cloud(n=2000, seed=0, z=0.0, part_id=1):
    from partscene.geometry import AnnotatedCloud
    rng = np.random.default_rng(seed)
    pts = np.stack([rng.uniform(0, 1, n), rng.uniform(0, 1, n),
                    np.full(n, float(z))], axis=1)
    return AnnotatedCloud(points=pts, colors=np.full((n, 3), 128, np.uint8),
                          normals=None, object_id=np.ones(n, np.int64),
                          part_id=np.full(n, part_id, np.int64),
                          label_table={part_id: "plane"})
