"""Communicating finite state machines for the four transfer roles."""

from .core import (
    AckLifecycle,
    BlockIoDone,
    BroadcastEof,
    ChannelConnected,
    CloseChannel,
    CloseSession,
    DiskReady,
    EndOfFile,
    ExceptionReceived,
    FsmAction,
    FsmEvent,
    FsmTrace,
    HeaderReceived,
    IllegalTransition,
    LocalError,
    MoveToReadList,
    MoveToWriteList,
    NegotiationReceived,
    PayloadRef,
    PeerClosed,
    ReadBlockFromDisk,
    ReadReady,
    SendBlockPayload,
    SendException,
    SendHeader,
    TraceStep,
    WriteBlockToDisk,
    WriteReady,
    advance_lifecycle,
    format_action,
    format_event,
    redact_action,
    redact_event,
)
from .duality import DualityReport, check_duality
from .machines import (
    CLIENT_DOWNLOAD,
    CLIENT_UPLOAD,
    MACHINES,
    SERVER_DOWNLOAD,
    SERVER_UPLOAD,
    ClientDownloadState,
    ClientUploadState,
    Machine,
    MachineSpec,
    ReceiverState,
    Rule,
    SenderState,
    ServerDownloadState,
    ServerUploadState,
    client_download_machine,
    client_upload_machine,
    replay,
    server_download_machine,
    server_upload_machine,
    step_client_download,
    step_client_upload,
    step_server_download,
    step_server_upload,
)

__all__ = [name for name in dir() if not name.startswith("_")]
