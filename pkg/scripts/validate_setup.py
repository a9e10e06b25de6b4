#!/usr/bin/env python3
"""
Validation script for the query reformulation pipeline setup.
"""
import os
import sys
import tempfile
from pathlib import Path

# Add the project root to Python path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))


def test_core_imports():
    """Test core application imports."""
    print("🧪 Testing core imports...")

    modules = [
        ("app.core.config", "Configuration"),
        ("app.schemas.schemas", "Schemas"),
        ("app.services.llm_client", "LLM gateway"),
        ("app.services.embedding", "Embedding providers"),
        ("app.services.retrieval", "Retrieval"),
        ("app.services.qerm", "Reward model"),
        ("app.tasks.tasks", "Orchestration"),
    ]
    for module_name, description in modules:
        try:
            __import__(module_name)
            print(f"  ✅ {description} imported")
        except Exception as e:
            print(f"  ❌ {description} import failed: {e}")
            return False
    return True


def test_configuration():
    """Test that the default configuration validates."""
    print("\n⚙️  Testing configuration...")
    try:
        from app.core.config import validate_config
        cfg = validate_config({})
        print(f"  ✅ Defaults: w0={cfg.w0}, sim_threshold={cfg.sim_threshold}, N={cfg.n_per_prompt}, M={cfg.max_iterations}")
        return True
    except Exception as e:
        print(f"  ❌ Configuration failed: {e}")
        return False


def test_offline_run():
    """Run the pipeline on the demo dataset with mock providers."""
    print("\n🚀 Testing an offline run...")
    try:
        from app.core.config import validate_config
        from app.tasks.tasks import build_context, run_pipeline
        from scripts.build_demo_dataset import build

        with tempfile.TemporaryDirectory() as tmp:
            dataset_dir = Path(tmp) / "demo"
            build(dataset_dir, dim=64, seed=0)
            context = build_context(validate_config({}), dataset_dir)
            report, manifest = run_pipeline(context, Path(tmp) / "out")
        print(f"  ✅ nDCG@{report.k} = {report.mean:.4f} over {len(report.per_query)} queries, "
              f"{manifest.failure_count} failures")
        return True
    except Exception as e:
        print(f"  ❌ Offline run failed: {e}")
        return False


def main():
    print("🔍 Query reformulation pipeline - setup validation")
    print("=" * 50)
    results = [test_core_imports(), test_configuration(), test_offline_run()]
    print("\n" + "=" * 50)
    if all(results):
        print("🎉 All checks passed")
        return 0
    print("⚠️  Some checks failed")
    return 1


if __name__ == "__main__":
    sys.exit(main())
