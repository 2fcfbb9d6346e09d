import time

import pytest

from hashquant import oracle as ngp
from hashquant.images import checkerboard

ACCEPTANCE_SEED = 1


@pytest.fixture(scope="session")
def board_128():
    return checkerboard(128, 8)


@pytest.fixture(scope="session")
def acceptance_training(board_128):
    """The 5000-step reference training run shared by the acceptance criteria.

    Returns (model, float_psnr, wall_seconds)."""
    start = time.perf_counter()
    model = ngp.train(board_128, ngp.NgpConfig(), 5000, seed=ACCEPTANCE_SEED)
    wall = time.perf_counter() - start
    quality = ngp.psnr(ngp.render(model, None, board_128.width, board_128.height), board_128)
    return model, quality, wall
