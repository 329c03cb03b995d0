"""Named, counter-keyed RNG substreams.

Every stochastic choice in the package draws from a generator derived as a
pure function of ``(run seed, purpose, counter)``. Because stream position is
never carried across steps, toggling one feature cannot shift another
feature's draws, and a resumed run reproduces the continuation of an
uninterrupted one exactly.
"""

import numpy as np

# Stable purpose ids; appending is fine, renumbering is a compatibility break.
PURPOSES = {
    "init": 0,      # parameter initialization
    "data": 1,      # dataset generation (counter = scene index)
    "split": 2,     # labeled/unlabeled partition
    "batch_x": 3,   # labeled batch sampling (counter = step)
    "batch_u": 4,   # unlabeled pool shuffling (counter = epoch)
    "aug_x": 5,     # weak augmentation of the labeled batch (counter = step)
    "aug_u": 6,     # weak+strong augmentation of the unlabeled batch
    "cutmix": 7,    # region masks, trigger draw, pairing
    "eval": 8,      # reserved
}


def substream(seed, purpose, counter=None):
    """Return a ``numpy.random.Generator`` for one (seed, purpose[, counter])."""
    pid = PURPOSES[purpose]
    entropy = (int(seed), pid) if counter is None else (int(seed), pid, int(counter))
    return np.random.default_rng(np.random.SeedSequence(entropy))
