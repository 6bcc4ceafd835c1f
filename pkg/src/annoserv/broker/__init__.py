"""Embedded durable message bus."""

from annoserv.broker.core import (
    DEAD_LETTER_QUEUE,
    Broker,
    BrokerError,
    ConfigurationError,
    Consumer,
    Delivery,
    ProtocolError,
    QueueDescriptor,
    StorageFull,
    UnknownQueue,
)

__all__ = [
    "DEAD_LETTER_QUEUE",
    "Broker",
    "BrokerError",
    "ConfigurationError",
    "Consumer",
    "Delivery",
    "ProtocolError",
    "QueueDescriptor",
    "StorageFull",
    "UnknownQueue",
]
