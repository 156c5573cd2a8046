import numpy as np
import torch

from ..correspondence import (
    FeatureMap,
    SyntheticFeatureProvider,
    build_correspondence_map,
    correspondence_pyramid,
    extract_point_embeddings,
    retrieval_accuracy,
)
from ..guidance_net.pipeline import NetConfig, wire_variant
from ..pose_io import PoseSequence
from ..run_utils import require
from ..trajectory import build_trajectory
from .core import CheckSettings, check

MODULE = "correspondence"


@check(module=MODULE)
def self_retrieval_accuracy(settings: CheckSettings):
    """Every query on an injective feature map retrieves itself."""
    rng = np.random.default_rng(settings.seed)
    features = SyntheticFeatureProvider(dim=16, seed=settings.seed).features(np.zeros((32, 32, 3)))
    points = [tuple(int(v) for v in p) for p in rng.integers(0, 32, (100, 2))]
    accuracy = retrieval_accuracy(features, features, points, points)
    require(accuracy == 1.0, MODULE, "self retrieval", accuracy=accuracy)
    return {"queries": 100, "accuracy": accuracy}


@check(module=MODULE)
def nonzero_columns_are_embeddings(settings: CheckSettings):
    """Every nonzero correspondence column equals a reference embedding bit for bit."""
    rng = np.random.default_rng(settings.seed)
    coords = rng.uniform(0, 48, (5, 12, 2))
    conf = rng.uniform(0.2, 1, (5, 12))
    traj = build_trajectory(PoseSequence(48, 48, coords, conf))
    features = FeatureMap(rng.standard_normal((6, 24, 24)), 48, 48)
    emb = extract_point_embeddings(features, traj)
    stack = build_correspondence_map(emb, traj, 48, 48)

    valid_vectors = emb.vectors[emb.valid]
    mask = stack.nonzero_mask()
    for n in range(stack.frames):
        columns = stack.data[n][:, mask[n]].T
        matched = all(any(np.array_equal(col, v) for v in valid_vectors) for col in columns)
        require(matched, MODULE, "nonzero columns are embeddings", frame=n + 1)
        bound = int(np.sum(emb.valid & traj.valid[n + 1]))
        require(len(columns) <= bound, MODULE, "sparsity", frame=n + 1, nonzero=len(columns), valid=bound)
    return {"frames": stack.frames, "nonzero": stack.nonzero_counts()}


@check(module=MODULE)
def level_shapes_match_encoder(settings: CheckSettings):
    """Each pyramid level has the spatial dims of the encoder features the ControlNet copies."""
    net = NetConfig(seed=settings.seed)
    pipeline = wire_variant(net)
    size = net.image_size
    traj = build_trajectory(PoseSequence(size, size, np.full((3, 4, 2), size / 2), np.ones((3, 4))))
    emb = extract_point_embeddings(SyntheticFeatureProvider(net.feature_dim).features(np.zeros((size, size, 3))), traj)
    pyramid = correspondence_pyramid(emb, traj, size, size, net.level_dims())

    latent = torch.zeros(1, 4, net.latent_size, net.latent_size)
    with torch.no_grad():
        features, _ = pipeline.base.encode(latent, pipeline.base.embed(torch.ones(1)))
    for level, (stack, feature) in enumerate(zip(pyramid, features)):
        require(stack.data.shape[2:] == tuple(feature.shape[2:]), MODULE, "level shape", level=level,
                correspondence=list(stack.data.shape[2:]), encoder=list(feature.shape[2:]))
    return {"levels": [list(s.data.shape[2:]) for s in pyramid]}
