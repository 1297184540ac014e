import { createConsole } from "./app.js";

const DEFAULT_BASE_URL = "http://127.0.0.1:8700";

function currentBaseUrl(): string {
  return localStorage.getItem("diagchat.baseUrl") ?? DEFAULT_BASE_URL;
}

const shell = document.getElementById("app");
if (!shell) throw new Error("missing #app mount point");

const urlBar = document.createElement("div");
urlBar.className = "url-bar";
const urlInput = document.createElement("input");
urlInput.id = "base-url";
urlInput.value = currentBaseUrl();
const applyButton = document.createElement("button");
applyButton.textContent = "Set service URL";
urlBar.append(urlInput, applyButton);
document.body.insertBefore(urlBar, shell);

function mount(): void {
  createConsole(shell as HTMLElement, currentBaseUrl());
}

applyButton.addEventListener("click", () => {
  localStorage.setItem("diagchat.baseUrl", urlInput.value.trim());
  mount();
});

mount();
