from app.commands import bench, build_table, forward, verify

__all__ = ["build_table", "forward", "verify", "bench"]
