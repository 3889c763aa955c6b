import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from catreid.data import ImageRecord, KeypointSet


def make_keypoints(n_visible=17, base=(1.0, 1.0)):
    rows = [[base[0] + 0.1 * i, base[1] + 0.05 * i, 1] for i in range(n_visible)]
    return KeypointSet.from_rows(rows)


def make_record(cat="cat1", side="left", tod="night", path=None,
                camera="cam0", bbox=(0.0, 0.0, 20.0, 20.0), keypoints=None,
                capture_time=None):
    return ImageRecord(
        image_path=path or f"images/{cat}_{side}_{tod}.png",
        cat_id=cat,
        side=side,
        camera_id=camera,
        bbox=bbox,
        keypoints=keypoints or make_keypoints(),
        time_of_day=tod,
        capture_time=capture_time,
    )


def write_manifest_lines(path: Path, objs) -> Path:
    with open(path, "w") as fh:
        for obj in objs:
            fh.write((obj if isinstance(obj, str) else json.dumps(obj)) + "\n")
    return path


def manifest_obj(cat="cat1", side="left", tod="night", path=None,
                 bbox=(0, 0, 20, 20), keypoints=None, **extra):
    obj = {
        "image_path": path or f"images/{cat}_{side}_{tod}.png",
        "cat_id": cat,
        "side": side,
        "time_of_day": tod,
        "camera_id": "cam0",
        "bbox": list(bbox),
        "keypoints": keypoints if keypoints is not None
        else [[1.0, 1.0, 1]] * 17,
    }
    obj.update(extra)
    return obj


@pytest.fixture(scope="session")
def toy_dataset_dir(tmp_path_factory):
    """Small toy dataset shared by pipeline-level tests."""
    from catreid.toydata import generate_toy_dataset

    out = tmp_path_factory.mktemp("toy")
    generate_toy_dataset(out, cats=4, images_per_entity=3, seed=11)
    return out
