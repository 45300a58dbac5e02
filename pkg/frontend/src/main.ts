// Entry point: a small start form (observer id, seed, manifest path on
// the server), then the session flow.

import { StudyClient } from "./api.js";
import { StudyApp } from "./app.js";

function mountStartForm(root: HTMLElement): void {
  const doc = root.ownerDocument;
  root.textContent = "";
  const form = doc.createElement("form");
  form.className = "start-form";
  form.innerHTML = `
    <h2>Observer study</h2>
    <label>Observer id <input name="observer" required></label>
    <label>Session seed <input name="seed" type="number" value="0" required></label>
    <label>Manifest path <input name="manifest" required></label>
    <button type="submit">Start session</button>
    <div class="start-error"></div>
  `;
  form.addEventListener("submit", (ev) => {
    ev.preventDefault();
    const data = new FormData(form);
    const client = new StudyClient();
    void client
      .createSession(
        String(data.get("observer")),
        Number(data.get("seed")),
        String(data.get("manifest")),
      )
      .then(({ session_id, pair_count }) => {
        const app = new StudyApp(root, client, session_id, pair_count);
        return app.start();
      })
      .catch((err: Error) => {
        const banner = form.querySelector<HTMLElement>(".start-error");
        if (banner) {
          banner.textContent = err.message;
        }
      });
  });
  root.appendChild(form);
}

const rootEl = document.getElementById("app");
if (rootEl) {
  mountStartForm(rootEl);
}
