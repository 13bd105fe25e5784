"""Small model factory shared by the training tests."""
import torch

from animal2vec.frontend import FrontendConfig
from animal2vec.network import Animal2Vec, NetworkConfig

TINY_LAYOUT = ((8, 10, 5), (8, 3, 2))


def tiny_model(n_classes=0, double=False, seed=0, **net):
    torch.manual_seed(seed)
    fc = FrontendConfig(n_filters=4, conv_layers=TINY_LAYOUT)
    kw = dict(in_dim=8, layers=2, heads=2, embed_dim=8, ffn_dim=16, dropout=0.0, layerdrop=0.0,
              pos_conv_kernel=3, pos_conv_groups=2, decoder_dim=8, decoder_kernel=3,
              decoder_groups=2, decoder_layers=2, n_classes=n_classes)
    kw.update(net)
    model = Animal2Vec(fc, NetworkConfig(**kw))
    return model.double() if double else model
