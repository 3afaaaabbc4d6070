"""Vanilla MLP autoencoder used to move cells into a latent space.

The OT map is learned between encoded populations; predictions are decoded
back to feature space. Once trained the autoencoder is frozen.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_is_fitted, check_points
from .exceptions import DataError
from .nn import AdamWState, MlpParams, adamw_step, init_params, mlp_backward, mlp_forward
from .serialization import load_arrays, mlp_from_arrays, mlp_to_arrays, save_arrays


@dataclass
class AutoencoderConfig:
    latent_dim: int = 50
    hidden: tuple = (512, 512)
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-4
    weight_decay: float = 1e-5
    seed: int = 0


@dataclass
class AutoencoderParams:
    encoder: MlpParams
    decoder: MlpParams
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.encoder.out_dim != self.decoder.in_dim:
            raise ValueError(
                f"encoder emits {self.encoder.out_dim} dims but decoder expects {self.decoder.in_dim}"
            )
        if self.decoder.out_dim != self.encoder.in_dim:
            raise ValueError("decoder output width must equal encoder input width")

    @property
    def latent_dim(self):
        return self.encoder.out_dim

    @property
    def input_dim(self):
        return self.encoder.in_dim


def encode(params, X):
    X = check_points(X, "X")
    if X.shape[1] != params.input_dim:
        raise ValueError(f"encoder expects {params.input_dim} features, got {X.shape[1]}")
    return mlp_forward(params.encoder, X)[0]


def decode(params, Z):
    Z = check_points(Z, "Z")
    if Z.shape[1] != params.latent_dim:
        raise ValueError(f"decoder expects {params.latent_dim} latent dims, got {Z.shape[1]}")
    return mlp_forward(params.decoder, Z)[0]


def reconstruction_mse(params, X):
    X = check_points(X, "X")
    return float(np.mean((decode(params, encode(params, X)) - X) ** 2))


def train_autoencoder(data, config=None):
    """Fit encoder and decoder with AdamW on mean-squared reconstruction error.

    ``loss_history[e]`` is the full-data MSE after epoch ``e``.
    """
    config = config or AutoencoderConfig()
    try:
        X = check_points(data, "data")
    except ValueError as exc:
        raise DataError(str(exc)) from None
    n, d = X.shape
    k = int(config.latent_dim)
    if k > d:
        raise ValueError(f"latent_dim {k} exceeds the feature dimension {d}")

    hidden = [int(h) for h in config.hidden]
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    encoder = init_params([d, *hidden, k], seeds[0])
    decoder = init_params([k, *hidden[::-1], d], seeds[1])
    rng = np.random.default_rng(seeds[2])
    state = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    n_enc = 2 * encoder.n_layers
    batch = min(int(config.batch_size), n)

    history = []
    for _ in range(int(config.epochs)):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            xb = X[order[start : start + batch]]
            z, enc_tape = mlp_forward(encoder, xb)
            out, dec_tape = mlp_forward(decoder, z)
            grad_out = 2.0 * (out - xb) / out.size
            dec_grads, grad_z = mlp_backward(decoder, dec_tape, grad_out)
            enc_grads, _ = mlp_backward(encoder, enc_tape, grad_z)
            new, state = adamw_step(
                encoder.arrays() + decoder.arrays(),
                enc_grads.arrays() + dec_grads.arrays(),
                state,
            )
            encoder = MlpParams.from_arrays(new[:n_enc])
            decoder = MlpParams.from_arrays(new[n_enc:])
        history.append(reconstruction_mse(AutoencoderParams(encoder, decoder), X))
    return AutoencoderParams(encoder, decoder, history)


def save_autoencoder(path, params, seed=None):
    arrays = {**mlp_to_arrays(params.encoder, "encoder"), **mlp_to_arrays(params.decoder, "decoder")}
    meta = {
        "kind": "autoencoder",
        "activation": "gelu",
        "encoder_sizes": params.encoder.sizes,
        "decoder_sizes": params.decoder.sizes,
        "latent_dim": params.latent_dim,
        "loss_history": list(params.loss_history),
        "seed": seed,
    }
    return save_arrays(path, arrays, meta)


def load_autoencoder(path):
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "autoencoder":
        raise DataError(f"{path} does not hold an autoencoder checkpoint")
    return AutoencoderParams(
        mlp_from_arrays(arrays, "encoder"),
        mlp_from_arrays(arrays, "decoder"),
        list(meta.get("loss_history", [])),
    )


class Autoencoder(TransformerMixin, BaseEstimator):
    """Scikit-learn wrapper: ``transform`` encodes, ``inverse_transform`` decodes.

    Examples
    --------
    >>> ae = Autoencoder(latent_dim=2, hidden=(16,), epochs=5).fit(X)  # doctest: +SKIP
    >>> Z = ae.transform(X)                                            # doctest: +SKIP
    """

    def __init__(
        self,
        latent_dim=50,
        hidden=(512, 512),
        epochs=50,
        batch_size=256,
        lr=1e-4,
        weight_decay=1e-5,
        random_state=0,
    ):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y=None):
        config = AutoencoderConfig(
            latent_dim=self.latent_dim,
            hidden=tuple(self.hidden),
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            seed=self.random_state,
        )
        self.params_ = train_autoencoder(X, config)
        self.loss_history_ = list(self.params_.loss_history)
        self.n_features_in_ = self.params_.input_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        return encode(self.params_, X)

    def inverse_transform(self, Z):
        check_is_fitted(self, "params_")
        return decode(self.params_, Z)

    def score(self, X, y=None):
        """Negative reconstruction MSE (higher is better)."""
        check_is_fitted(self, "params_")
        return -reconstruction_mse(self.params_, X)
