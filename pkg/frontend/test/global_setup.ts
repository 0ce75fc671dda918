import { buildCatalogFixture } from "./service_fixture.js";

export default function setup(): void {
  buildCatalogFixture();
}
