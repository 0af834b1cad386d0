"""Cutting a model into a client front and server back, and the round algebra.

One training round: every client runs its front on its local batch and ships
the feature map plus labels; the server concatenates in ascending client-id
order, finishes the forward pass, computes the mean-reduced loss, backprops,
and scatters the cut-layer gradient back by batch size. Clients backprop
their fronts and report gradients normalized to their local batch mean
(raw front gradient scaled by total/n_i); the batch-size-weighted average of
those equals the monolithic gradient exactly, which keeps split training
equal to centralized training step for step.
"""

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ProtocolError, ValidationError


@dataclass
class SplitModel:
    front: nn.Model
    back: nn.Model
    cut_index: int


@dataclass
class RoundResult:
    loss: float
    per_client_cut_grads: list  # raw scatter of the server's cut-layer gradient
    back_grads: list  # nested like back.params
    batch_sizes: list
    predictions: T.Tensor


def cut_model(model, cut_index=None):
    """Split layers [0, cut) / [cut, end); parameters are moved, not copied."""
    if cut_index is None:
        cut_index = nn.SMALL_VGG_CUT_INDEX
    if cut_index < 1 or cut_index >= len(model.specs):
        raise ValidationError(
            f"cut_index {cut_index} outside 1..{len(model.specs) - 1}"
        )
    shapes = model.output_shapes
    front = nn.Model(
        model.specs[:cut_index],
        model.params[:cut_index],
        model.input_shape,
        model.dtype,
        shapes[:cut_index],
    )
    back = nn.Model(
        model.specs[cut_index:],
        model.params[cut_index:],
        tuple(shapes[cut_index - 1]),
        model.dtype,
        shapes[cut_index:],
    )
    return SplitModel(front, back, cut_index)


def merge_model(split_model):
    """Test hook: recompose the uncut model from a SplitModel."""
    f, b = split_model.front, split_model.back
    return nn.Model(
        f.specs + b.specs,
        f.params + b.params,
        f.input_shape,
        f.dtype,
        f.output_shapes + b.output_shapes,
    )


def client_forward(front, local_batch):
    """Front pass on the client's own batch; None batch means skip this round."""
    if local_batch is None:
        return None
    return nn.forward(front, local_batch)


def server_round(back, feature_maps, labels, client_ids, sort_by_id=True):
    """One server-side round over the participating clients' activations.

    Returns the mean loss over the concatenated batch, the raw per-client
    scatter of the cut-layer gradient, and the back parameter gradients
    (not applied).
    """
    if not feature_maps:
        raise ProtocolError("round received no activations from any client")
    if not (len(feature_maps) == len(labels) == len(client_ids)):
        raise ProtocolError(
            f"{len(feature_maps)} feature maps, {len(labels)} label tensors, "
            f"{len(client_ids)} client ids"
        )
    if len(set(client_ids)) != len(client_ids):
        raise ProtocolError(f"duplicate client ids in round: {client_ids}")
    for fm, lab in zip(feature_maps, labels):
        if fm.shape[0] != lab.shape[0]:
            raise ProtocolError(
                f"feature map batch {fm.shape[0]} != label batch {lab.shape[0]}"
            )
    order = np.argsort(client_ids) if sort_by_id else range(len(client_ids))
    fms = [feature_maps[i] for i in order]
    labs = [labels[i] for i in order]
    sizes = [fm.shape[0] for fm in fms]

    batch = T.concat(fms, axis=0) if len(fms) > 1 else fms[0]
    y = T.concat(labs, axis=0) if len(labs) > 1 else labs[0]
    pred, cache = nn.forward(back, batch)
    loss, grad_pred = nn.bce_loss(pred, y)
    back_grads, cut_grad = nn.backward(back, cache, grad_pred)
    scatter = T.split_axis(cut_grad, 0, sizes) if len(sizes) > 1 else [cut_grad]
    return RoundResult(loss, scatter, back_grads, sizes, pred)


def client_backward(front, cache, cut_gradient):
    """Standard backward through the front; returns gradients, applies nothing."""
    if cache is None:
        raise ProtocolError("client has no cached forward state for this round")
    grads, _ = nn.backward(front, cache, cut_gradient, need_input_grad=False)
    return grads


def local_mean_grads(raw_grads, batch_size, total_batch):
    """Rescale raw front gradients (of the global-mean loss) to the client's
    local-batch-mean convention expected by sync_front_weights."""
    scale = total_batch / batch_size
    return [
        [T.Tensor(g.data * g.dtype.type(scale)) for g in layer] for layer in raw_grads
    ]


def sync_front_weights(front_params, per_client_grads, batch_sizes, learning_rate):
    """Aggregate per-client front gradients and take one SGD step.

    per_client_grads must be in the local-mean convention (see
    local_mean_grads); the aggregate is sum_i (n_i / sum n) * g_i. The caller
    broadcasts the returned parameters to every client.
    """
    if len(per_client_grads) != len(batch_sizes):
        raise ValidationError(
            f"{len(per_client_grads)} gradient sets but {len(batch_sizes)} batch sizes"
        )
    total = sum(batch_sizes)
    agg = None
    for grads, n in zip(per_client_grads, batch_sizes):
        w = n / total
        if agg is None:
            agg = [[g.data * g.dtype.type(w) for g in layer] for layer in grads]
        else:
            for al, gl in zip(agg, grads, strict=True):
                for k, g in enumerate(gl):
                    if al[k].shape != g.shape:
                        raise ValidationError(
                            f"gradient shape {list(g.shape)} != {list(al[k].shape)}"
                        )
                    al[k] = al[k] + g.data * g.dtype.type(w)
    agg_t = [[T.Tensor(a) for a in layer] for layer in agg]
    return nn.sgd_step(front_params, agg_t, learning_rate)


def train_split_rounds(model, cut_index, rounds, learning_rate):
    """In-process split training over explicit per-round client batches.

    rounds is a sequence of dicts {client_id: (batch, labels)}. Returns the
    merged trained model and the per-round losses. This is the reference
    driver the transport-backed engine mirrors message for message.
    """
    sm = cut_model(model, cut_index)
    losses = []
    for round_batches in rounds:
        if not round_batches:
            raise ProtocolError("round with no participating clients")
        ids = sorted(round_batches)
        caches = {}
        fms, labs = [], []
        for cid in ids:
            batch, lab = round_batches[cid]
            fm, cache = client_forward(sm.front, batch)
            caches[cid] = cache
            fms.append(fm)
            labs.append(lab)
        result = server_round(sm.back, fms, labs, ids)
        sm.back.params = nn.sgd_step(sm.back.params, result.back_grads, learning_rate)
        total = sum(result.batch_sizes)
        per_client = []
        for cid, cut_grad, n in zip(ids, result.per_client_cut_grads, result.batch_sizes):
            raw = client_backward(sm.front, caches[cid], cut_grad)
            per_client.append(local_mean_grads(raw, n, total))
        sm.front.params = sync_front_weights(
            sm.front.params, per_client, result.batch_sizes, learning_rate
        )
        losses.append(result.loss)
    return merge_model(sm), losses


def train_monolithic_rounds(model, rounds, learning_rate):
    """Reference centralized trainer over pre-concatenated round batches.

    rounds is a sequence of (batch, labels). The SPLIT==CENTRAL oracle: with
    the same initial model and the same concatenated batches this produces
    the same parameters as train_split_rounds.
    """
    losses = []
    for batch, labels in rounds:
        pred, cache = nn.forward(model, batch)
        loss, grad_pred = nn.bce_loss(pred, labels)
        grads, _ = nn.backward(model, cache, grad_pred, need_input_grad=False)
        model.params = nn.sgd_step(model.params, grads, learning_rate)
        losses.append(loss)
    return model, losses
