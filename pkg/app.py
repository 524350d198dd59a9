import streamlit as st
import os
import json
import logging

from config import LOG_FORMAT, ConfigError, load_config
from reports import read_json
from training import LOG_FILE, read_training_log

# Page config
st.set_page_config(
    page_title="OST Run Viewer",
    page_icon="🛰️",
    layout="wide",
    initial_sidebar_state="expanded"
)

logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
logging.info("--- Starting App ---")

base_path = os.path.dirname(os.path.abspath(__file__))


@st.cache_data
def load_run_file(path: str, mtime: float) -> dict | None:
    """Reads a JSON report; mtime is part of the cache key so reruns pick up new results."""
    try:
        return read_json(path)
    except (OSError, json.JSONDecodeError) as e:
        logging.warning(f"Could not read {path}: {e}")
        return None


@st.cache_data
def load_training_log(path: str, mtime: float) -> list:
    return read_training_log(path)


@st.cache_data
def load_predictions(path: str, mtime: float) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                record = json.loads(line)
                x, y, z, l, w, h, yaw = record["box"]
                rows.append({"seq": record["seq"], "frame": record["frame"], "x": x, "y": y, "z": z,
                             "yaw": yaw, "ms": record["ms"]})
    return rows


def run_file(run_dir: str, name: str) -> tuple:
    path = os.path.join(run_dir, name)
    return (path, os.path.getmtime(path)) if os.path.exists(path) else (None, None)


st.markdown("""
<style>
    .main-header {
        background: linear-gradient(135deg, #667eea 0%, #764ba2 100%);
        padding: 1.5rem 1rem;
        border-radius: 10px;
        margin-bottom: 1.5rem;
        text-align: center;
        color: white;
    }
    .main-title { font-size: 2.4rem; font-weight: bold; color: white !important; }
    .main-subtitle { font-size: 1.1rem; opacity: 0.9; color: white !important; }
    .metric-card {
        background: #e9ecef !important;
        color: #212529 !important;
        padding: 1rem;
        border-radius: 8px;
        border-left: 4px solid;
        text-align: center;
    }
</style>
""", unsafe_allow_html=True)

st.markdown("""
<div class="main-header">
    <div class="main-title">🛰️ One-Stream Tracker Runs</div>
    <div class="main-subtitle">training curves, Success / Precision and model cost</div>
</div>
""", unsafe_allow_html=True)

with st.sidebar:
    st.markdown("### ⚙️ Run Directory")
    run_dir = st.text_input("Output directory", value=os.path.join(base_path, "runs", "latest"))
    st.markdown("---")
    st.markdown("#### 📋 Configuration")
    try:
        cfg = load_config()
        st.markdown(f"• source: `{cfg.source or 'built-in defaults'}`")
        st.markdown(f"• points: `{cfg.model.n_template}` template / `{cfg.model.n_search}` search")
        st.markdown(f"• width `{cfg.model.feat_dim}`, `{cfg.model.ttm_layers}` layers, `{cfg.model.heads}` heads")
        st.markdown(f"• MFA `{cfg.model.mfa_direction}` {list(cfg.model.mfa_samples)}")
        st.markdown(f"• grid `{cfg.model.bev_grid.nx}x{cfg.model.bev_grid.ny}` at `{cfg.model.bev_grid.pixel_size}` m")
    except ConfigError as e:
        st.error(f"❌ {e}")

if not os.path.isdir(run_dir):
    st.info("💡 Point the sidebar at a directory written by `ost.py train` / `ost.py eval`.")
    st.stop()

# Metrics
metrics_path, metrics_mtime = run_file(run_dir, "metrics.json")
if metrics_path:
    metrics = load_run_file(metrics_path, metrics_mtime)
    pools = {"observed": metrics.get("observed"), "unseen": metrics.get("unseen")} if "setting" in metrics \
        else {"all": metrics}
    st.markdown("### 📊 Success / Precision")
    for pool, report in pools.items():
        if not report:
            st.warning(f"⚠️ {pool}: empty pool")
            continue
        col1, col2, col3 = st.columns(3)
        for col, label, value, color in ((col1, f"{pool} Success", f"{report['success']:.1f}", "#28a745"),
                                         (col2, f"{pool} Precision", f"{report['precision']:.1f}", "#007bff"),
                                         (col3, "Frames", f"{report['frames']}", "#6c757d")):
            with col:
                st.markdown(f"""
                <div class="metric-card" style="border-left-color: {color};">
                    <h3 style="margin: 0;">{value}</h3>
                    <p style="margin: 0;">{label}</p>
                </div>
                """, unsafe_allow_html=True)
        if report.get("per_category"):
            st.dataframe([{"category": k, **v} for k, v in report["per_category"].items()])
        with st.expander(f"📈 {pool} curves", expanded=False):
            st.line_chart({"success": report["success_curve"], "precision": report["precision_curve"]})
        with st.expander(f"📑 {pool} per sequence", expanded=False):
            st.dataframe([{"sequence": k, **v} for k, v in report["per_sequence"].items()])

# Training
log_path, log_mtime = run_file(run_dir, LOG_FILE)
if log_path:
    rows = load_training_log(log_path, log_mtime)
    st.markdown("### 📉 Training Loss")
    if rows:
        st.line_chart({key: [r[key] for r in rows] for key in ("L_total", "L_seg", "L_center", "L_offset", "L_z")})
        st.caption(f"{len(rows)} steps, last total {rows[-1]['L_total']:.4f}")

# Cost
cost_path, cost_mtime = run_file(run_dir, "cost.json")
if cost_path:
    cost = load_run_file(cost_path, cost_mtime)
    st.markdown("### 🧮 Model Cost")
    col1, col2, col3 = st.columns(3)
    col1.metric("Parameters", f"{cost['params']:,}")
    col2.metric("GFLOPs / forward", f"{cost['flops'] / 1e9:.3f}")
    col3.metric("FPS", f"{cost['fps']:.1f}")
    st.bar_chart(cost["flops_by_component"])

# Predictions
preds_path, preds_mtime = run_file(run_dir, "preds.jsonl")
if preds_path:
    st.markdown("### 🎯 Predictions")
    rows = load_predictions(preds_path, preds_mtime)
    sequences = sorted({r["seq"] for r in rows})
    chosen = st.selectbox("Sequence", sequences)
    st.dataframe([r for r in rows if r["seq"] == chosen])
