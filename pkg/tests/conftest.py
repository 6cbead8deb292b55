import sys
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.manual_seed(0)


def random_instance(gen, batch=None, feat=None, classes=None, rotations=True):
    """A random small problem instance in double precision.

    Returns a dict with teacher/student logits, rotation-expanded student and
    teacher features, centers for both sides, and labels. Feature rows and
    center columns are kept away from zero norm.
    """
    b = batch or int(torch.randint(1, 5, (1,), generator=gen))
    k = feat or int(torch.randint(2, 9, (1,), generator=gen))
    c = classes or int(torch.randint(2, 6, (1,), generator=gen))
    rows = 4 * b if rotations else b
    def randn(*shape):
        return torch.randn(*shape, generator=gen, dtype=torch.float64)

    def away_from_zero(t, dim):
        norms = t.norm(dim=dim, keepdim=True)
        return t / norms.clamp_min(1e-3) * norms.clamp_min(0.3)

    if rotations:
        source = torch.arange(b).repeat_interleave(4)
        rot = torch.arange(4).repeat(b)
    else:
        source = torch.arange(b)
        rot = torch.zeros(b, dtype=torch.long)
    return {
        "b": b, "k": k, "c": c,
        "student_logits": randn(b, c),
        "teacher_logits": randn(b, c),
        "labels": torch.randint(0, c, (b,), generator=gen),
        "student_features": away_from_zero(randn(rows, k), 1),
        "teacher_features": away_from_zero(randn(rows, k), 1),
        "source_sample": source,
        "rotation_index": rot,
        "student_centers": away_from_zero(randn(k, c), 0),
        "teacher_centers": away_from_zero(randn(k, c), 0),
    }
