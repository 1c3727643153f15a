"""Reconstruction decoder D(.) and the shared projection head."""
import torch
import torch.nn as nn
import torch.nn.functional as F


def mlp3(in_dim, hidden, out_dim):
    return nn.Sequential(
        nn.Linear(in_dim, hidden), nn.GELU(),
        nn.Linear(hidden, hidden), nn.GELU(),
        nn.Linear(hidden, out_dim),
    )


def _init_linear(module):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ReconstructionDecoder(nn.Module):
    """Three-layer MLP per data token, then a stride-p transposed convolution
    that maps each 256-d token back to its p x p pixel block."""

    def __init__(self, embed_dim, patch_size, grid, hidden=2048, bottleneck=256):
        super().__init__()
        self.patch_size = patch_size
        self.grid = tuple(grid)
        self.mlp = mlp3(embed_dim, hidden, bottleneck)
        self.recover = nn.ConvTranspose2d(bottleneck, 1, kernel_size=patch_size, stride=patch_size)
        _init_linear(self.mlp)
        nn.init.zeros_(self.recover.bias)

    def _check(self, tokens):
        if tokens.shape[-1] != self.mlp[0].in_features:
            raise ValueError(f"token dim {tokens.shape[-1]} != decoder input "
                             f"{self.mlp[0].in_features}")

    def forward(self, tokens):
        """N x (n+1) x d token sequence -> N x H x W image (class token ignored)."""
        self._check(tokens)
        data = tokens[:, 1:]
        gh, gw = self.grid
        if data.shape[1] != gh * gw:
            raise ValueError(f"expected {gh * gw} data tokens, got {data.shape[1]}")
        h = self.mlp(data).transpose(1, 2).reshape(data.shape[0], -1, gh, gw)
        return self.recover(h)[:, 0]

    def patch_pixels(self, data_tokens):
        """Pixels for a subset of data tokens: (..., d) -> (..., p*p).

        Equal to the corresponding blocks of ``forward`` because the recovery
        convolution has kernel == stride, i.e. acts on each token alone.
        """
        self._check(data_tokens)
        h = self.mlp(data_tokens)
        weight = self.recover.weight.reshape(self.recover.weight.shape[0], -1)
        return h @ weight + self.recover.bias


class ProjectionHead(nn.Module):
    """MLP -> l2-normalised 256-d bottleneck -> weight-normalised linear to K.

    The final layer has fixed unit gain: its rows are normalised inside
    ``forward`` and re-projected to unit norm after every optimizer step, so
    every logit is a cosine and lies in [-1, 1].
    """

    def __init__(self, embed_dim, out_dim=8192, hidden=2048, bottleneck=256):
        super().__init__()
        self.mlp = mlp3(embed_dim, hidden, bottleneck)
        self.last = nn.Linear(bottleneck, out_dim, bias=False)
        _init_linear(self)
        self.renormalize_()

    def bottleneck(self, tokens):
        if tokens.shape[-1] != self.mlp[0].in_features:
            raise ValueError(f"token dim {tokens.shape[-1]} != head input "
                             f"{self.mlp[0].in_features}")
        return F.normalize(self.mlp(tokens), dim=-1, eps=1e-12)

    def forward(self, tokens):
        w = F.normalize(self.last.weight, dim=1)
        return self.bottleneck(tokens) @ w.t()

    @torch.no_grad()
    def renormalize_(self):
        self.last.weight.copy_(F.normalize(self.last.weight, dim=1))


def reconstruct(tokens, decoder: ReconstructionDecoder):
    return decoder(tokens)


def project(tokens, head: ProjectionHead):
    return head(tokens)
