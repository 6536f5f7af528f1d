"""Federated protocol: messages, transport and the round engine."""
from .engine import (
    RunResult,
    SerqConfig,
    ServerState,
    SiteData,
    SiteFailure,
    SiteState,
    TrainConfig,
    aggregate,
    assemble_global,
    average_trees,
    ema_update,
    evaluate,
    local_round,
    local_step,
    make_server,
    make_site,
    pad_history,
    personalized_average,
    plain_config,
    pretrain,
    quantification_loss,
    refresh_ema,
    run_federation,
    run_fedavg,
    run_local_only,
    serq_eq,
    serq_round,
    serq_sc,
    sync_loss,
)
from .protocol import Direction, RoundMessage, decode_message, encode_message, payload_equal
from .transport import Transport, TransportMode
