/** Small safe renderers: markdown to HTML and python-ish code highlighting.
 * Everything is HTML-escaped first; only the tags produced here appear. */

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function inline(text: string): string {
  return text
    .replace(/`([^`]+)`/g, "<code>$1</code>")
    .replace(/\*\*([^*]+)\*\*/g, "<strong>$1</strong>")
    .replace(/\*([^*]+)\*/g, "<em>$1</em>")
    .replace(/\[([^\]]+)\]\((https?:[^)\s]+)\)/g, '<a href="$2" rel="noopener">$1</a>');
}

export function renderMarkdown(source: string): string {
  const lines = escapeHtml(source).split("\n");
  const html: string[] = [];
  let paragraph: string[] = [];
  let fence: string[] | null = null;

  const flush = () => {
    if (paragraph.length > 0) {
      html.push(`<p>${inline(paragraph.join("<br>"))}</p>`);
      paragraph = [];
    }
  };

  for (const line of lines) {
    if (fence !== null) {
      if (/^```/.test(line)) {
        html.push(`<pre class="md-code">${fence.join("\n")}</pre>`);
        fence = null;
      } else {
        fence.push(line);
      }
      continue;
    }
    if (/^```/.test(line)) {
      flush();
      fence = [];
      continue;
    }
    const heading = /^(#{1,4})\s+(.*)$/.exec(line);
    if (heading) {
      flush();
      const level = heading[1].length;
      html.push(`<h${level}>${inline(heading[2])}</h${level}>`);
      continue;
    }
    const bullet = /^[-*]\s+(.*)$/.exec(line);
    if (bullet) {
      flush();
      html.push(`<li>${inline(bullet[1])}</li>`);
      continue;
    }
    if (line.trim() === "") {
      flush();
      continue;
    }
    paragraph.push(line);
  }
  if (fence !== null) html.push(`<pre class="md-code">${fence.join("\n")}</pre>`);
  flush();
  return html.join("\n");
}

const KEYWORDS = new Set(
  (
    "def class return if elif else for while import from as with try except " +
    "finally raise lambda yield pass break continue in is not and or None " +
    "True False assert global async await"
  ).split(" "),
);

// One pass over the escaped source: strings, comments, words, numbers.
const TOKEN =
  /(&quot;[^\n]*?&quot;|'[^'\n]*')|(#[^\n]*)|\b([A-Za-z_]\w*)\b|\b(\d+(?:\.\d+)?)\b/g;

export function highlightCode(source: string): string {
  return escapeHtml(source).replace(TOKEN, (match, str, comment, word, num) => {
    if (str) return `<span class="tok-str">${str}</span>`;
    if (comment) return `<span class="tok-com">${comment}</span>`;
    if (word) return KEYWORDS.has(word) ? `<span class="tok-kw">${word}</span>` : word;
    if (num) return `<span class="tok-num">${num}</span>`;
    return match;
  });
}
