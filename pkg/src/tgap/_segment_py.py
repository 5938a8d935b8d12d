"""Pure-numpy segment reductions, API-identical to the compiled ``_segment``."""
import numpy as np


def segment_sum(values, seg, num):
    out = np.zeros((num, values.shape[1]), dtype=values.dtype)
    np.add.at(out, seg, values)
    return out


def segment_max(values, seg, num):
    out = np.full((num, values.shape[1]), -np.inf, dtype=values.dtype)
    np.maximum.at(out, seg, values)
    return out


def segment_softmax(logits, seg, num):
    mx = segment_max(logits, seg, num)
    ex = np.exp(logits - mx[seg])
    den = segment_sum(ex, seg, num)
    return ex / den[seg]


def segment_softmax_backward(probs, grad, seg, num):
    dot = segment_sum(probs * grad, seg, num)
    return probs * (grad - dot[seg])
