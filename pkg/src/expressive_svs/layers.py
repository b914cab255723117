"""Shared network building blocks. Tensors are laid out (batch, channels, time)."""
import math

import torch
from torch import nn
from torch.nn import functional as F


def sequence_mask(lengths, max_len=None):
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def sinusoid_positions(length, channels, dtype=torch.float32, device=None):
    pos = torch.arange(length, dtype=dtype, device=device)[:, None]
    idx = torch.arange(0, channels, 2, dtype=dtype, device=device)
    inv = torch.exp(-math.log(10000.0) * idx / channels)
    pe = torch.zeros(length, channels, dtype=dtype, device=device)
    pe[:, 0::2] = torch.sin(pos * inv)
    pe[:, 1::2] = torch.cos(pos * inv)[:, : channels // 2]
    return pe.t()  # (C, T)


class LayerNorm(nn.Module):
    """LayerNorm over the channel axis of a (B, C, T) tensor."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x):
        return self.norm(x.transpose(1, -1)).transpose(1, -1)


class FFTBlock(nn.Module):
    """Self-attention followed by a two-layer convolutional feed-forward net."""

    def __init__(self, channels, filter_channels, n_heads, kernel_size, p_dropout=0.0):
        super().__init__()
        self.attn = nn.MultiheadAttention(channels, n_heads, dropout=p_dropout, batch_first=True)
        self.norm1 = LayerNorm(channels)
        self.conv1 = nn.Conv1d(channels, filter_channels, kernel_size, padding=kernel_size // 2)
        self.conv2 = nn.Conv1d(filter_channels, channels, kernel_size, padding=kernel_size // 2)
        self.norm2 = LayerNorm(channels)
        self.drop = nn.Dropout(p_dropout)

    def forward(self, x, mask):
        # mask: (B, 1, T) float
        xt = (x * mask).transpose(1, 2)
        y, _ = self.attn(xt, xt, xt, key_padding_mask=mask[:, 0] < 0.5, need_weights=False)
        x = self.norm1(x + self.drop(y.transpose(1, 2)))
        y = self.conv1(x * mask)
        y = self.drop(torch.relu(y))
        y = self.conv2(y * mask)
        x = self.norm2(x + self.drop(y))
        return x * mask


class FFTEncoder(nn.Module):
    def __init__(self, channels, filter_channels, n_heads, n_layers, kernel_size, p_dropout=0.0, positional=True):
        super().__init__()
        self.positional = positional
        self.blocks = nn.ModuleList(
            FFTBlock(channels, filter_channels, n_heads, kernel_size, p_dropout) for _ in range(n_layers)
        )

    def forward(self, x, mask):
        if self.positional:
            x = x + sinusoid_positions(x.size(2), x.size(1), x.dtype, x.device)[None]
        x = x * mask
        for block in self.blocks:
            x = block(x, mask)
        return x


class ConvStack(nn.Module):
    """Conv1d -> ReLU -> LayerNorm -> Dropout, repeated, then a 1x1 projection."""

    def __init__(self, in_channels, channels, out_channels, n_layers, kernel_size=3, p_dropout=0.0):
        super().__init__()
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        for i in range(n_layers):
            self.convs.append(nn.Conv1d(in_channels if i == 0 else channels, channels, kernel_size, padding=kernel_size // 2))
            self.norms.append(LayerNorm(channels))
        self.drop = nn.Dropout(p_dropout)
        self.proj = nn.Conv1d(channels, out_channels, 1)

    def forward(self, x, mask):
        for conv, norm in zip(self.convs, self.norms):
            x = self.drop(norm(torch.relu(conv(x * mask))))
        return self.proj(x * mask) * mask


class WN(nn.Module):
    """Non-causal WaveNet-style stack of gated dilated convolutions."""

    def __init__(self, channels, kernel_size, dilation_rate, n_layers, cond_channels=0, p_dropout=0.0):
        super().__init__()
        self.n_layers = n_layers
        self.channels = channels
        self.in_layers = nn.ModuleList()
        self.res_skip = nn.ModuleList()
        self.drop = nn.Dropout(p_dropout)
        self.cond = nn.Conv1d(cond_channels, 2 * channels * n_layers, 1) if cond_channels else None
        for i in range(n_layers):
            d = dilation_rate**i
            self.in_layers.append(nn.Conv1d(channels, 2 * channels, kernel_size, dilation=d, padding=d * (kernel_size - 1) // 2))
            out = 2 * channels if i < n_layers - 1 else channels
            self.res_skip.append(nn.Conv1d(channels, out, 1))

    def forward(self, x, mask, cond=None):
        output = torch.zeros_like(x)
        if cond is not None and self.cond is not None:
            cond = self.cond(cond)
        for i in range(self.n_layers):
            h = self.in_layers[i](x * mask)
            if cond is not None and self.cond is not None:
                h = h + cond[:, i * 2 * self.channels : (i + 1) * 2 * self.channels]
            a, b = h.chunk(2, dim=1)
            acts = self.drop(torch.tanh(a) * torch.sigmoid(b))
            rs = self.res_skip[i](acts)
            if i < self.n_layers - 1:
                x = (x + rs[:, : self.channels]) * mask
                output = output + rs[:, self.channels :]
            else:
                output = output + rs
        return output * mask


def length_regulate(x, durations, max_frames=None):
    """Repeat phoneme vectors along time. x: (B, C, N), durations: (B, N) int.

    Returns (frames, frame_lengths) with frames shaped (B, C, T).
    """
    lengths = durations.sum(dim=1)
    T = int(lengths.max()) if max_frames is None else max_frames
    out = x.new_zeros(x.size(0), x.size(1), T)
    for b in range(x.size(0)):
        rep = torch.repeat_interleave(x[b], durations[b], dim=1)[:, :T]
        out[b, :, : rep.size(1)] = rep
    return out, lengths


def get_padding(kernel_size, dilation=1):
    return (kernel_size * dilation - dilation) // 2


def leaky(x):
    return F.leaky_relu(x, 0.1)
