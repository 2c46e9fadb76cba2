import pytest

from panoalign import geometry, oracle, resample

BOX = oracle.SceneSpec(kind="box", size=(3.0, 2.0, 4.0),
                       camera=(0.25, -0.2, 0.4), height=128, width=256)
SCALES = (1.0, 1.2, 0.8, 1.1, 0.9, 1.05)


@pytest.fixture(scope="session")
def box_scene():
    return oracle.render_scene(BOX)


@pytest.fixture(scope="session")
def box_cam():
    return geometry.CameraModel.cube(64)


@pytest.fixture(scope="session")
def merged_identity(box_scene, box_cam):
    """Uncorrupted per-face renders merged back to ERP."""
    dfaces, nfaces = oracle.corrupt(box_scene, box_cam, oracle.Corruption(), seed=7)
    depth, face_id, valid = resample.merge_depth_to_erp(dfaces, box_cam, (128, 256))
    normals = resample.merge_normals_to_erp(nfaces, box_cam, face_id)
    return depth, normals, face_id, valid


@pytest.fixture(scope="session")
def merged_corrupted(box_scene, box_cam):
    """Per-face renders with the standard scale corruption, merged to ERP."""
    dfaces, nfaces = oracle.corrupt(box_scene, box_cam,
                                    oracle.Corruption(scales=SCALES), seed=7)
    depth, face_id, valid = resample.merge_depth_to_erp(dfaces, box_cam, (128, 256))
    normals = resample.merge_normals_to_erp(nfaces, box_cam, face_id)
    return depth, normals, face_id, valid
