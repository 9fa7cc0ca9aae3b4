from graphseg.cli import entrypoint

entrypoint()
