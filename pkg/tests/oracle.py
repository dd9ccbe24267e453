"""Straight-line float reimplementation of the GAP model, for cross-checking.

Uses only ``math`` and nested lists: no numpy, no tape. Parameter layout
follows the checkpoint contract (LSTM gates stacked input, forget, output,
candidate).
"""
import math


def _mv(W, x):
    return [sum(w * v for w, v in zip(row, x)) for row in W]


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def _lstm(p, prefix, h, c, x):
    W_x = p[f"{prefix}.w_x"].tolist()
    W_h = p[f"{prefix}.w_h"].tolist()
    b = p[f"{prefix}.b"].tolist()
    k = len(h)
    z = [a + bb + cc for a, bb, cc in zip(_mv(W_x, x), _mv(W_h, h), b)]
    i = [_sig(v) for v in z[:k]]
    f = [_sig(v) for v in z[k:2 * k]]
    o = [_sig(v) for v in z[2 * k:3 * k]]
    g = [math.tanh(v) for v in z[3 * k:]]
    c2 = [ff * cc + ii * gg for ff, cc, ii, gg in zip(f, c, i, g)]
    h2 = [oo * math.tanh(cc) for oo, cc in zip(o, c2)]
    return h2, c2


def _softmax(s):
    top = max(s)
    e = [math.exp(v - top) for v in s]
    tot = sum(e)
    return [v / tot for v in e]


def gap_model_probs(params, persons):
    """Activity probabilities per timestep; ``persons`` is n x T x d_x nested lists."""
    n, T = len(persons), len(persons[0])
    hp = len(params["person_lstm.w_h"][0])
    hg = len(params["group_lstm.w_h"][0])
    hs = [[0.0] * hp for _ in range(n)]
    cs = [[0.0] * hp for _ in range(n)]
    H, C = [0.0] * hg, [0.0] * hg
    W_att = params["pool.person.W"].tolist()
    b_att = params["pool.person.b"].tolist()
    u_att = params["pool.person.u"].tolist()
    out = []
    for t in range(T):
        P = []
        for i in range(n):
            x = list(persons[i][t])
            hs[i], cs[i] = _lstm(params, "person_lstm", hs[i], cs[i], x)
            P.append(hs[i] + x)
        scores = []
        for Pi in P:
            u = [math.tanh(a + b) for a, b in zip(_mv(W_att, Pi), b_att)]
            scores.append(sum(a * b for a, b in zip(u, u_att)))
        alpha = _softmax(scores)
        G = [sum(alpha[i] * P[i][k] for i in range(n)) for k in range(len(P[0]))]
        z = [math.tanh(a + b) for a, b in zip(_mv(params["group_fc.weight"].tolist(), G),
                                               params["group_fc.bias"].tolist())]
        H, C = _lstm(params, "group_lstm", H, C, z)
        logits = [a + b for a, b in zip(_mv(params["activity_head.weight"].tolist(), H),
                                        params["activity_head.bias"].tolist())]
        out.append(_softmax(logits))
    return out
