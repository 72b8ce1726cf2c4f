"""Brute-force reference implementations the test suite checks against.

Everything here is written for obviousness, not speed: direct double-sum
DFTs with cmath, per-pixel Python loops for fusion and scoring. Nothing
imports the package under test.
"""

import cmath
import math


def naive_dft2d(plane):
    """Direct O((HW)^2) unnormalized forward DFT. plane: list of rows."""
    height = len(plane)
    width = len(plane[0])
    out = [[0j] * width for _ in range(height)]
    for m in range(height):
        for n in range(width):
            acc = 0j
            for h in range(height):
                for w in range(width):
                    angle = -2.0 * math.pi * (h * m / height + w * n / width)
                    acc += plane[h][w] * cmath.exp(1j * angle)
            out[m][n] = acc
    return out


def naive_idft2d(spec):
    """Direct inverse with the 1/(H*W) factor; returns complex rows."""
    height = len(spec)
    width = len(spec[0])
    out = [[0j] * width for _ in range(height)]
    for h in range(height):
        for w in range(width):
            acc = 0j
            for m in range(height):
                for n in range(width):
                    angle = 2.0 * math.pi * (h * m / height + w * n / width)
                    acc += spec[m][n] * cmath.exp(1j * angle)
            out[h][w] = acc / (height * width)
    return out


def naive_transfer_plane(src_plane, tgt_plane, half_h, half_w):
    """Amplitude swap on one plane: target amplitude inside the centered
    window (inclusive half-widths), source phase everywhere, then inverse.
    Returns real rows; half-widths of 0 mean an inactive window."""
    height = len(src_plane)
    width = len(src_plane[0])
    src_spec = naive_dft2d(src_plane)
    tgt_spec = naive_dft2d(tgt_plane)
    active = half_h >= 1 and half_w >= 1
    mixed = [[0j] * width for _ in range(height)]
    for m in range(height):
        for n in range(width):
            mc = ((m + height // 2) % height) - height // 2
            nc = ((n + width // 2) % width) - width // 2
            inside = active and abs(mc) <= half_h and abs(nc) <= half_w
            amp = abs(tgt_spec[m][n]) if inside else abs(src_spec[m][n])
            phase = cmath.phase(src_spec[m][n]) if src_spec[m][n] != 0 else 0.0
            mixed[m][n] = amp * cmath.exp(1j * phase)
    return [[z.real for z in row] for row in naive_idft2d(mixed)]


def naive_mask_cells(beta, height, width):
    """Centered window membership by direct scan; returns a set of (h, w)."""
    half_h = math.floor(beta * height)
    half_w = math.floor(beta * width)
    if half_h < 1 or half_w < 1:
        return set()
    cells = set()
    for h in range(height):
        for w in range(width):
            hc = ((h + height // 2) % height) - height // 2
            wc = ((w + width // 2) % width) - width // 2
            if abs(hc) <= half_h and abs(wc) <= half_w:
                cells.add((h, w))
    return cells


def naive_mean(score_stacks):
    """Elementwise mean of a list of (K, H, W) nested lists."""
    first = score_stacks[0]
    classes, height, width = len(first), len(first[0]), len(first[0][0])
    out = [
        [[0.0] * width for _ in range(height)]
        for _ in range(classes)
    ]
    for stack in score_stacks:
        for k in range(classes):
            for h in range(height):
                for w in range(width):
                    out[k][h][w] += stack[k][h][w]
    m = float(len(score_stacks))
    for k in range(classes):
        for h in range(height):
            for w in range(width):
                out[k][h][w] /= m
    return out


def naive_argmax(scores):
    """Per-pixel argmax over a (K, H, W) nested list, first index on ties."""
    classes, height, width = len(scores), len(scores[0]), len(scores[0][0])
    labels = [[0] * width for _ in range(height)]
    for h in range(height):
        for w in range(width):
            best, best_k = scores[0][h][w], 0
            for k in range(1, classes):
                if scores[k][h][w] > best:
                    best, best_k = scores[k][h][w], k
            labels[h][w] = best_k
    return labels


def naive_confusion(pred, gt, classes, ignore=255):
    """Per-pixel counting loop; returns (counts rows, ignored_pixels).

    A pixel is scored only when neither label is the ignore value.
    """
    counts = [[0] * classes for _ in range(classes)]
    ignored = 0
    for prow, grow in zip(pred, gt):
        for p, g in zip(prow, grow):
            if g == ignore or p == ignore:
                ignored += 1
            else:
                counts[g][p] += 1
    return counts, ignored


def naive_iou(counts):
    """Per-class IoU from a counts matrix; None marks an empty union."""
    classes = len(counts)
    out = []
    for k in range(classes):
        inter = counts[k][k]
        union = sum(counts[k]) + sum(row[k] for row in counts) - inter
        out.append(inter / union if union > 0 else None)
    return out
