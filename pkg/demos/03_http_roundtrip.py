"""Drive the HTTP service end to end: boot it, upload a scene, invert, submit
an edit job, poll its event stream, and download both result images.

    python demos/03_http_roundtrip.py [checkpoint]
"""
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import httpx
import torch

torch.set_num_threads(1)

from dragedit.images import save_image, save_mask
from dragedit.toydata import Scene, render_scene, shape_mask

checkpoint = sys.argv[1] if len(sys.argv) > 1 else "checkpoints/toy.pt"
workdir = Path(tempfile.mkdtemp(prefix="dragedit-demo-"))

proc = subprocess.Popen(
    [sys.executable, "-m", "dragedit.cli", "serve", "--checkpoint", checkpoint,
     "--port", "8731", "--sessions-dir", str(workdir / "sessions")],
    stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
client = httpx.Client(base_url="http://127.0.0.1:8731", timeout=30)

try:
    for _ in range(100):
        try:
            client.get("/healthz")
            break
        except httpx.HTTPError:
            time.sleep(0.2)
    print("service is up:", client.get("/healthz").json()["model"])

    scene = Scene(shape="triangle", color="yellow", size="big", cx=16.0,
                  cy=12.0, radius=7.0)
    save_image(render_scene(scene), workdir / "scene.png")
    save_mask(torch.from_numpy(shape_mask(scene)).float(), workdir / "mask.png")

    sid = client.post("/sessions",
                      content=(workdir / "scene.png").read_bytes()
                      ).json()["session_id"]
    client.post(f"/sessions/{sid}/mask",
                content=(workdir / "mask.png").read_bytes())
    print("session:", sid)

    inv = client.post(f"/sessions/{sid}/invert",
                      json={"prompt": scene.caption}).json()
    print("inverted:", inv["trajectory"])

    jid = client.post(f"/sessions/{sid}/jobs", json={
        "prompt_source": scene.caption,
        "prompt_target": scene.caption,
        "drag": {"dx": -5, "dy": 5},
        "cfg_scale_1": 1.0,
        "energy": {"m_edit": 30.0, "m_content": 30.0, "m_inpaint": 60.0,
                   "clip_norm": 10.0},
    }).json()["job_id"]
    print("job:", jid)

    cursor = 0
    while True:
        page = client.get(f"/jobs/{jid}/events",
                          params={"cursor": cursor}).json()
        for event in page["events"]:
            if event["stage"] in ("branch1", "branch2") and event["t"] % 20 == 0:
                print(f"  {event['stage']}  t={event['t']}")
        cursor = page["cursor"]
        if page["status"] in ("done", "failed"):
            print("status:", page["status"])
            break
        time.sleep(0.3)

    for branch in ("branch1", "branch2"):
        png = client.get(f"/jobs/{jid}/result/{branch}")
        Path(f"demo03_{branch}.png").write_bytes(png.content)
    print("wrote demo03_branch1.png / demo03_branch2.png")
finally:
    proc.terminate()
    proc.wait(timeout=10)
