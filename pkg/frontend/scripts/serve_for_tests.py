"""Boot two recovery-service instances for the console's end-to-end tests.

Instance A runs the bundled taxonomy; instance B runs one with the resolutions
rotated across causes, so identical submissions earn different verdicts. A
quickly overfit checkpoint makes CB-H-M decodes non-trivial. Prints one JSON
line with both base URLs, then serves until killed.
"""

import json
import socket
import tempfile
import threading
from importlib import resources
from pathlib import Path

import uvicorn

from faultex import faults, features, pipeline, seq2seq, simulator, templates, worldmodel
from faultex.service import create_app
from faultex.service.sessions import ServiceDeps


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def quick_checkpoint(vocab, envs, out_dir: Path) -> Path:
    env = envs["kitchen"]
    task = worldmodel.make_task(env, "milk")
    trace = simulator.run_episode(
        env, task, faults.FaultSpec("object occluded", task.target_object), seed=5, pre_error_steps=16
    )
    fv = features.extract_features(trace.last_state, env, task, vocab)
    target = tuple(vocab.encode_text(trace.annotations[-1])) + (features.END_ID,)
    params = seq2seq.init_params(len(vocab), seed=1)
    state = seq2seq.adam_init(params)
    batch = seq2seq.make_batch([seq2seq.TrainingExample(fv, target)])
    for _ in range(400):
        _, grads = seq2seq.loss_and_grads(params, batch)
        params, state = seq2seq.adam_step(params, grads, state, lr=1e-2)
    path = out_dir / "model.ckpt"
    seq2seq.save_checkpoint(path, params, vocab.content_hash())
    return path


def swapped_taxonomy(out_dir: Path) -> Path:
    doc = json.loads(resources.files("faultex.configs").joinpath("taxonomy.json").read_text())
    causes = doc["causes"]
    rotated = [causes[(i + 1) % len(causes)]["resolution"] for i in range(len(causes))]
    for entry, resolution in zip(causes, rotated):
        entry["resolution"] = resolution
    path = out_dir / "taxonomy-swapped.json"
    path.write_text(json.dumps(doc))
    return path


def main() -> None:
    tmp = Path(tempfile.mkdtemp(prefix="faultex-e2e-"))
    envs = worldmodel.load_environments()
    tax = faults.default_taxonomy()
    book = templates.default_phrases()
    vocab = features.build_vocab(pipeline.corpus_for(envs, tax, book))
    ckpt = quick_checkpoint(vocab, envs, tmp)
    model = seq2seq.load_checkpoint(ckpt, vocab.content_hash())

    deps_default = ServiceDeps(envs=envs, tax=tax, phrases=book, vocab=vocab, model=model)
    tax_swapped = faults.load_taxonomy(swapped_taxonomy(tmp))
    deps_swapped = ServiceDeps(envs=envs, tax=tax_swapped, phrases=book, vocab=vocab, model=model)

    port_a, port_b = free_port(), free_port()
    print(
        json.dumps(
            {"baseUrl": f"http://127.0.0.1:{port_a}", "swappedUrl": f"http://127.0.0.1:{port_b}"}
        ),
        flush=True,
    )

    def serve(app, port):
        uvicorn.Server(uvicorn.Config(app, host="127.0.0.1", port=port, log_level="error")).run()

    thread = threading.Thread(target=serve, args=(create_app(deps_default), port_a), daemon=True)
    thread.start()
    serve(create_app(deps_swapped), port_b)


if __name__ == "__main__":
    main()
