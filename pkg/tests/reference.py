"""Independent plain-numpy LSTM used as an oracle by the model tests."""

import numpy as np


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def lstm_seq(x, W, U, b):
    """Standard LSTM over x (B, T, in), gate order i, f, g, o. Returns all hidden states."""
    B, T, _ = x.shape
    H = U.shape[1]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    out = np.zeros((B, T, H))
    for t in range(T):
        z = x[:, t] @ W.T + h @ U.T + b
        i, f, g, o = sigmoid(z[:, :H]), sigmoid(z[:, H : 2 * H]), np.tanh(z[:, 2 * H : 3 * H]), sigmoid(z[:, 3 * H :])
        c = f * c + i * g
        h = o * np.tanh(c)
        out[:, t] = h
    return out


def dilated_lstm_seq(x, W, U, b, d):
    """Split time into d interleaved chains, run each as a plain LSTM, scatter back."""
    out = np.zeros(x.shape[:2] + (U.shape[1],))
    for j in range(d):
        out[:, j::d] = lstm_seq(x[:, j::d], W, U, b)
    return out


def encoder(x, arrays, schedule, bidirectional=True):
    h = x
    for layer, d in enumerate(schedule):
        p = lambda direction, k: arrays[f"lstm.{layer}.{direction}.{k}"]  # noqa: E731
        fwd = dilated_lstm_seq(h, p("fwd", "W"), p("fwd", "U"), p("fwd", "b"), d)
        if bidirectional:
            bwd = dilated_lstm_seq(h[:, ::-1], p("bwd", "W"), p("bwd", "U"), p("bwd", "b"), d)[:, ::-1]
            h = fwd + bwd
        else:
            h = fwd
    if not bidirectional:
        return fwd[:, -1]
    return np.concatenate([fwd[:, -1], bwd[:, 0]], axis=1)
