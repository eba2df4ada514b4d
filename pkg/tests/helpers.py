import torch


def central_difference(fn, tensor: torch.Tensor, step: float = 1e-4) -> torch.Tensor:
    """Entrywise central differences of a scalar function w.r.t. ``tensor`` (perturbed in place)."""
    out = torch.zeros_like(tensor)
    flat, grad = tensor.data.view(-1), out.view(-1)
    with torch.no_grad():
        for j in range(flat.numel()):
            orig = flat[j].item()
            flat[j] = orig + step
            plus = float(fn())
            flat[j] = orig - step
            minus = float(fn())
            flat[j] = orig
            grad[j] = (plus - minus) / (2 * step)
    return out


def naive_matmul(a, b):
    """Triple-loop product over Python floats."""
    rows, inner, cols = len(a), len(b), len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(inner)) for j in range(cols)] for i in range(rows)]
