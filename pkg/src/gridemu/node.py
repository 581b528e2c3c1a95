"""Run a single grid component as its own OS process.

Prints ``READY <host:port>`` on stdout once listening, or
``FAILED <ErrorCode> <message>`` and exits 1.
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
import threading

from .config import COMPONENTS, RunConfig
from .errors import GridError
from .runtime import RealtimeRuntime
from .transport import Endpoint, serve


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gridemu.node")
    parser.add_argument("--component", required=True, choices=COMPONENTS)
    parser.add_argument("--config", required=True)
    parser.add_argument("--peers", default="{}")
    parser.add_argument("--start-epoch", type=float, default=None)
    args = parser.parse_args(argv)

    from .grid import component_class

    with open(args.config) as fh:
        config = RunConfig.from_dict(json.load(fh))
    runtime = RealtimeRuntime(json.loads(args.peers), start_epoch=args.start_epoch,
                              call_timeout_ms=config.call_timeout_ms)
    listener = None
    try:
        component = component_class(args.component)(runtime, config)
        listener = serve(Endpoint(args.component, f"{config.bind_host}:{config.port_of(args.component)}"),
                         component.handle)
        component.address = listener.address
        runtime.set_endpoint(args.component, listener.address)
        component.start()
    except GridError as exc:
        if listener is not None:
            listener.stop()
        print(f"FAILED {exc.code} {exc}", flush=True)
        return 1

    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    print(f"READY {listener.address}", flush=True)
    while not stop.is_set() and not component.stopped.is_set():
        stop.wait(0.1)
    component.stop()
    listener.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
