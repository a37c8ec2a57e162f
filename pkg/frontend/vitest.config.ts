import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    environment: "node",
    testTimeout: 20000,
    hookTimeout: 120000,
    // the e2e file boots the real editing service; keep runs serial so two
    // tests never race one server
    fileParallelism: false,
  },
});
