"""Dataset directory I/O shared by the simulator, the pipeline, and tools.

Layout of a dataset directory:

    manifest.json          index: submaps, frame ids, file names, thresholds
    groundtruth.tum        true trajectory (timestamp tx ty tz qx qy qz qw)
    depth_<s>_<f>.vgsb     per submap incidence (f64, h x w); overlap frames
    conf_<s>_<f>.vgsb      appear once per submap with distinct corruption
    K_<s>_<f>.vgsb         3x3 f64 reported intrinsics
    pose_<s>_<f>.vgsb      4x4 f64 reported pose in the submap frame
    desc_<f>.vgsb          per frame (f32): place descriptor
    qtok_<f>.vgsb          per frame (f32, n x d): query tokens
    ktok_<f>.vgsb          per frame (f32, n x d): key tokens

Descriptors and tokens model what a network would compute from the image
itself, so the two copies of an overlap frame share one file.  Loop-closure
submaps are pre-rendered for every retrievable candidate pair and listed in
the manifest under "loop_pairs".
"""

import json
import os

import numpy as np

from .errors import FormatError
from .evaluation import Trajectory, rotation_to_quat, write_tum
from .retrieval import TokenSet
from .submap import Keyframe, Submap, LOOP_CLOSURE, REGULAR
from .vgsb import read_blob, write_blob

MANIFEST_NAME = "manifest.json"
GROUNDTRUTH_NAME = "groundtruth.tum"
FORMAT_VERSION = 1
CANDIDATE_THRESHOLD = 0.90      # pre-render margin below the 0.95 default


def _frame_files(submap_id: int, frame_id: int) -> dict:
    return {
        "depth": f"depth_{submap_id}_{frame_id}.vgsb",
        "conf": f"conf_{submap_id}_{frame_id}.vgsb",
        "k": f"K_{submap_id}_{frame_id}.vgsb",
        "pose": f"pose_{submap_id}_{frame_id}.vgsb",
        "desc": f"desc_{frame_id}.vgsb",
        "qtok": f"qtok_{frame_id}.vgsb",
        "ktok": f"ktok_{frame_id}.vgsb",
    }


def _write_submap(submap: Submap, out_dir: str, written_frames: set) -> dict:
    entry = {
        "submap_id": submap.submap_id,
        "kind": submap.kind,
        "frame_ids": submap.frame_ids,
        "frames": [],
    }
    for kf in submap.keyframes:
        files = _frame_files(submap.submap_id, kf.frame_id)
        write_blob(os.path.join(out_dir, files["depth"]), kf.depth)
        write_blob(os.path.join(out_dir, files["conf"]), kf.conf)
        write_blob(os.path.join(out_dir, files["k"]), kf.k)
        write_blob(os.path.join(out_dir, files["pose"]), kf.pose)
        if kf.frame_id not in written_frames:
            written_frames.add(kf.frame_id)
            write_blob(os.path.join(out_dir, files["desc"]),
                       kf.descriptor.astype(np.float32))
            write_blob(os.path.join(out_dir, files["qtok"]),
                       kf.query_tokens.astype(np.float32))
            write_blob(os.path.join(out_dir, files["ktok"]),
                       kf.key_tokens.astype(np.float32))
        entry["frames"].append({
            "frame_id": kf.frame_id,
            "timestamp": kf.timestamp,
            "files": files,
        })
    return entry


def write_dataset(sim, out_dir: str, retrieval_threshold: float = 0.95,
                  match_threshold: float = 0.85, conf_percentile: float = 0.25,
                  min_disparity_px: float = 50.0,
                  candidate_threshold: float = CANDIDATE_THRESHOLD) -> dict:
    """Write a Simulation out as a dataset directory; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    plan = sim.plan
    n_frames = len(plan.poses)
    written_frames: set = set()

    manifest = {
        "format_version": FORMAT_VERSION,
        "name": plan.name,
        "seed": sim.seed,
        "frame_count": n_frames,
        "submap_size": plan.submap_size,
        "submap_count": plan.submap_count,
        "image_dims": list(sim.dims),
        "noise": sim.noise.to_dict(),
        "thresholds": {
            "retrieval_threshold": retrieval_threshold,
            "match_threshold": match_threshold,
            "conf_percentile": conf_percentile,
            "min_disparity_px": min_disparity_px,
        },
        "diameter": plan.diameter(),
        "submaps": [],
        "loop_pairs": [],
        "true_revisits": [],
        "groundtruth": GROUNDTRUTH_NAME,
    }

    for submap_id in range(plan.submap_count):
        submap = sim.regular_submap(submap_id)
        manifest["submaps"].append(_write_submap(submap, out_dir, written_frames))

    from .simulator import LOOP_SUBMAP_BASE_ID

    pairs = sim.candidate_pairs(candidate_threshold)
    for idx, (query, retrieved, sim_value) in enumerate(pairs):
        loop = sim.loop_submap(LOOP_SUBMAP_BASE_ID + idx, retrieved, query)
        manifest["loop_pairs"].append({
            "query_frame_id": query,
            "retrieved_frame_id": retrieved,
            "similarity": sim_value,
            "submap": _write_submap(loop, out_dir, written_frames),
        })
    manifest["true_revisits"] = [
        [q, r, s] for q, r, s in sim.true_revisits(retrieval_threshold)
    ]

    times, positions, rotations = [], [], []
    for frame_id in range(n_frames):
        pose = plan.poses[frame_id]
        times.append(plan.timestamps[frame_id])
        positions.append(pose[:3, 3])
        rotations.append(rotation_to_quat(pose[:3, :3]))
    write_tum(os.path.join(out_dir, GROUNDTRUTH_NAME),
              Trajectory(np.asarray(times), np.stack(positions), np.stack(rotations)))

    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return manifest


def _read_keyframe(dataset_dir: str, frame_entry: dict) -> Keyframe:
    files = frame_entry["files"]

    def blob(key):
        return read_blob(os.path.join(dataset_dir, files[key]))

    return Keyframe(
        frame_id=int(frame_entry["frame_id"]),
        timestamp=float(frame_entry["timestamp"]),
        pose=blob("pose"),
        k=blob("k"),
        depth=blob("depth"),
        conf=blob("conf"),
        descriptor=blob("desc").astype(np.float64),
        query_tokens=blob("qtok").astype(np.float64),
        key_tokens=blob("ktok").astype(np.float64),
    )


def _read_submap(dataset_dir: str, entry: dict) -> Submap:
    kind = entry["kind"]
    if kind not in (REGULAR, LOOP_CLOSURE):
        raise FormatError(f"unknown submap kind {kind!r}")
    keyframes = [_read_keyframe(dataset_dir, f) for f in entry["frames"]]
    return Submap(submap_id=int(entry["submap_id"]), kind=kind, keyframes=keyframes)


class DiskSubmapSource:
    """SubmapSource over a dataset directory written by write_dataset."""

    def __init__(self, dataset_dir: str):
        self.dataset_dir = dataset_dir
        path = os.path.join(dataset_dir, MANIFEST_NAME)
        try:
            with open(path) as fh:
                self.manifest = json.load(fh)
        except FileNotFoundError:
            raise FormatError(f"no {MANIFEST_NAME} in {dataset_dir}") from None
        except json.JSONDecodeError as err:
            raise FormatError(f"unreadable manifest: {err}") from None
        if self.manifest.get("format_version") != FORMAT_VERSION:
            raise FormatError(
                f"unsupported dataset format_version "
                f"{self.manifest.get('format_version')!r}"
            )
        self._loop_index = {
            (int(p["query_frame_id"]), int(p["retrieved_frame_id"])): p["submap"]
            for p in self.manifest.get("loop_pairs", [])
        }

    @property
    def submap_count(self) -> int:
        return len(self.manifest["submaps"])

    def regular_submaps(self):
        for entry in self.manifest["submaps"]:
            yield _read_submap(self.dataset_dir, entry)

    def loop_submap(self, query_frame_id: int, retrieved_frame_id: int) -> Submap:
        key = (query_frame_id, retrieved_frame_id)
        if key not in self._loop_index:
            raise FormatError(
                f"dataset has no pre-rendered loop pair for query frame "
                f"{query_frame_id} against frame {retrieved_frame_id}"
            )
        return _read_submap(self.dataset_dir, self._loop_index[key])

    @property
    def groundtruth_path(self) -> str:
        return os.path.join(self.dataset_dir, self.manifest["groundtruth"])

    def frame_tokens(self, frame_id: int) -> TokenSet:
        q = read_blob(os.path.join(self.dataset_dir, f"qtok_{frame_id}.vgsb"))
        k = read_blob(os.path.join(self.dataset_dir, f"ktok_{frame_id}.vgsb"))
        return TokenSet(q.astype(np.float64), k.astype(np.float64))
