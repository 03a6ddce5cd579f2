// Browser bootstrap: mounts the console and wires events by delegation.

import { HttpRecoveryApi } from "./api.js";
import { ConsoleApp } from "./console.js";
import { renderApp } from "./render.js";

const root = document.getElementById("app");
if (!root) throw new Error("missing #app mount point");

const baseUrl = (window as unknown as { FAULTEX_API?: string }).FAULTEX_API ?? "";
const app = new ConsoleApp(new HttpRecoveryApi(baseUrl));

function draw(): void {
  root!.innerHTML = renderApp(app.state, app.canSubmit);
}

app.subscribe(draw);
draw();

root.addEventListener("click", (event) => {
  const target = (event.target as HTMLElement).closest("[data-action]");
  if (!(target instanceof HTMLElement)) return;
  const action = target.dataset.action;
  if (action === "start") {
    const condition = (root.querySelector("[data-role=condition]") as HTMLSelectElement).value;
    const env = (root.querySelector("[data-role=env]") as HTMLSelectElement).value;
    const seed = Number((root.querySelector("[data-role=seed]") as HTMLInputElement).value) || 0;
    void app.start(condition, env, seed);
  } else if (action === "choose-cause") {
    app.select("cause", target.dataset.id ?? "");
  } else if (action === "choose-recovery") {
    app.select("recovery", target.dataset.id ?? "");
  } else if (action === "keyframe") {
    app.selectKeyframe(Number(target.dataset.index));
  } else if (action === "submit") {
    void app.submit();
  } else if (action === "next") {
    void app.acknowledge();
  } else if (action === "retry") {
    void app.retry();
  }
});
