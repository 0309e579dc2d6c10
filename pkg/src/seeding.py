import hashlib
import random

import numpy as np
import torch

PURPOSES = ("init", "data", "dropout", "adapters")


def derive_seed(root_seed: int, purpose: str, counter: int = 0) -> int:
    """
    Derive a sub-seed from the root seed.

    The derivation is counter based: the same (root, purpose, counter) triple
    always yields the same seed, and distinct purposes never share a stream.

    Args:
        root_seed (int): The run's root seed.
        purpose (str): One of PURPOSES.
        counter (int): Position in the purpose's stream.

    Returns:
        int: A non-negative seed below 2**63.
    """
    if purpose not in PURPOSES:
        raise ValueError(f"Unknown seed purpose '{purpose}', expected one of {PURPOSES}")
    digest = hashlib.blake2b(f"{root_seed}:{purpose}:{counter}".encode(), digest_size=8)
    return int.from_bytes(digest.digest(), "little") % (2**63)


def seed_everything(root_seed: int) -> None:
    seed = derive_seed(root_seed, "init")
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def torch_generator(root_seed: int, purpose: str, counter: int = 0) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(derive_seed(root_seed, purpose, counter))
    return generator
