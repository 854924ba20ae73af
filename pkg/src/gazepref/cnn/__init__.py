from .network import (ForwardCache, LayerParams, NetworkState, backward, forward, init_state,
                      loss, predict, predict_batch, scale_inputs, sgd_step, zero_state)
from .spec import (Conv, Dropout, Fc, MaxPool, NetworkSpec, Relu, SoftmaxOut, SpecError,
                   param_count, param_shapes, reference_spec)
from .train import BatchStream, DivergenceError, TrainConfig, TrainReport, accuracy, train
from .weights import (WeightsChecksumError, WeightsError, WeightsMagicError, WeightsShapeError,
                      load_weights, save_weights)
