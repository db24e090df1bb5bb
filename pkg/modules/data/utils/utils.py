import dataclasses
import hashlib
from pathlib import Path

import numpy as np
import omegaconf


def ensure_serializable(obj):
    r"""Ensures that the object is serializable.

    Dataclasses and OmegaConf containers become dictionaries, numpy scalars
    and arrays become Python numbers and lists.

    Parameters
    ----------
    obj : object
        Object to ensure serializability.

    Returns
    -------
    object
        Object that is serializable.
    """
    if isinstance(obj, omegaconf.DictConfig | omegaconf.ListConfig):
        return ensure_serializable(omegaconf.OmegaConf.to_container(obj, resolve=True))
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return ensure_serializable(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(key): ensure_serializable(value) for key, value in obj.items()}
    if isinstance(obj, list | tuple):
        return [ensure_serializable(item) for item in obj]
    if isinstance(obj, set):
        return sorted(ensure_serializable(item) for item in obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, str | int | float | bool | type(None)):
        return obj
    return None


def make_hash(o):
    r"""Makes a hash from a dictionary, list, tuple or set to any level, that
    contains only other hashable types (including any lists, tuples, sets, and
    dictionaries).

    Parameters
    ----------
    o : dict, list, tuple, set
        Object to hash.

    Returns
    -------
    int
        Hash of the object.
    """
    sha1 = hashlib.sha1()
    sha1.update(str.encode(str(o)))
    hash_as_hex = sha1.hexdigest()
    # Convert the hex back to int and restrict it to the relevant int range
    return int(hash_as_hex, 16) % 4294967295


def derive_seed(master: int, stage: str, stream: int) -> int:
    r"""Derives the seed of one random stream of a pipeline stage.

    The seed is the first 64 bits of the SHA-256 digest of
    ``"{master}:{stage}:{stream}"``.

    Parameters
    ----------
    master : int
        Master seed of the experiment.
    stage : str
        Stage name, e.g. ``"synth"``.
    stream : int
        Stream index within the stage (frame, trial, ...).

    Returns
    -------
    int
        Seed in ``[0, 2**64)``.
    """
    digest = hashlib.sha256(f"{int(master)}:{stage}:{int(stream)}".encode())
    return int(digest.hexdigest()[:16], 16)


def stage_rng(master: int, stage: str, stream: int = 0) -> np.random.Generator:
    r"""Returns the generator of one derived random stream."""
    return np.random.default_rng(derive_seed(master, stage, stream))


def file_digest(path) -> str:
    r"""SHA-256 hex digest of a file's bytes."""
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            sha.update(block)
    return sha.hexdigest()
